//! Per-channel histogram equalization.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    R = 0,
    G = 1,
    B = 2,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelHistogram {
    pub counts: [u64; 256],
}

impl ChannelHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn channel_histogram(img: &ImageBuffer, channel: Channel) -> ChannelHistogram {
    let mut counts = [0u64; 256];
    for v in img.channel_samples(channel.index()) {
        counts[v as usize] += 1;
    }
    ChannelHistogram { counts }
}

/// Monotone 256-entry remapping table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EqualizationLut {
    pub map: [u8; 256],
}

impl EqualizationLut {
    pub fn identity() -> Self {
        let mut map = [0u8; 256];
        for (v, slot) in map.iter_mut().enumerate() {
            *slot = v as u8;
        }
        Self { map }
    }

    #[inline]
    pub fn apply(&self, v: u8) -> u8 {
        self.map[v as usize]
    }

    pub fn is_monotone(&self) -> bool {
        self.map.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Builds the equalization table for one channel.
///
/// Occupied bins map to `round_half_up(255 * (cdf(v) - cdf_min) / (N - cdf_min))`.
/// Empty bins repeat the value of the nearest occupied bin below them (0 below
/// the lowest). A single occupied bin yields the identity table.
pub fn build_lut(hist: &ChannelHistogram) -> Result<EqualizationLut> {
    let n = hist.total();
    let Some(first) = hist.counts.iter().position(|&c| c > 0) else {
        return Err(Error::EmptyHistogram);
    };
    let cdf_min = hist.counts[first];
    let denom = n - cdf_min;
    if denom == 0 {
        return Ok(EqualizationLut::identity());
    }

    let mut map = [0u8; 256];
    let mut cdf = 0u64;
    let mut last = 0u8;
    for (v, &count) in hist.counts.iter().enumerate() {
        cdf += count;
        if count > 0 {
            // floor((2 * 255 * num + denom) / (2 * denom)) == round half up
            let num = cdf - cdf_min;
            let scaled = (510 * num as u128 + denom as u128) / (2 * denom as u128);
            last = scaled as u8;
        }
        map[v] = last;
    }
    Ok(EqualizationLut { map })
}

pub fn channel_luts(img: &ImageBuffer) -> [EqualizationLut; 3] {
    Channel::ALL
        .map(|ch| build_lut(&channel_histogram(img, ch)).expect("image has at least one pixel"))
}

/// Equalizes each RGB channel independently.
pub fn equalize(img: &ImageBuffer) -> ImageBuffer {
    let luts = channel_luts(img);
    let mut out = img.clone();
    for px in out.as_raw_mut().chunks_exact_mut(3) {
        for (ch, lut) in luts.iter().enumerate() {
            px[ch] = lut.apply(px[ch]);
        }
    }
    out
}

/// Writes `bin,countR,countG,countB` rows for all 256 bins.
pub fn write_histogram_csv(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let hists = Channel::ALL.map(|ch| channel_histogram(img, ch));
    let mut out = String::from("bin,countR,countG,countB\n");
    for bin in 0..256 {
        out.push_str(&format!(
            "{bin},{},{},{}\n",
            hists[0].counts[bin], hists[1].counts[bin], hists[2].counts[bin]
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

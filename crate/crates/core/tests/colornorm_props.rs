use proptest::prelude::*;

use facepipe::colornorm::{
    build_lut, channel_histogram, channel_luts, equalize, Channel, ChannelHistogram,
};
use facepipe::ImageBuffer;

fn image_strategy() -> impl Strategy<Value = ImageBuffer> {
    (1u32..=12, 1u32..=12, any::<[bool; 3]>()).prop_flat_map(|(w, h, flat)| {
        proptest::collection::vec(any::<u8>(), (w * h * 3) as usize).prop_map(move |mut data| {
            // Some channels constant, to exercise the identity case.
            for (c, &is_flat) in flat.iter().enumerate() {
                if is_flat {
                    let v = data[c];
                    data.iter_mut().skip(c).step_by(3).for_each(|s| *s = v);
                }
            }
            ImageBuffer::new(w, h, data).unwrap()
        })
    })
}

fn histogram_strategy() -> impl Strategy<Value = ChannelHistogram> {
    proptest::collection::vec((any::<u8>(), 1u64..50), 1..20).prop_map(|bins| {
        let mut counts = [0u64; 256];
        for (b, c) in bins {
            counts[b as usize] += c;
        }
        ChannelHistogram { counts }
    })
}

proptest! {
    #[test]
    fn histogram_counts_every_sample(img in image_strategy()) {
        for ch in Channel::ALL {
            let h = channel_histogram(&img, ch);
            prop_assert_eq!(h.total(), img.pixel_count() as u64);
            for (v, &count) in h.counts.iter().enumerate() {
                let brute = img.channel_samples(ch.index()).filter(|&s| s as usize == v).count() as u64;
                prop_assert_eq!(count, brute);
            }
        }
    }

    #[test]
    fn lut_is_monotone_and_spans_full_range(h in histogram_strategy()) {
        let lut = build_lut(&h).unwrap();
        prop_assert!(lut.is_monotone());
        let occupied: Vec<usize> = (0..256).filter(|&v| h.counts[v] > 0).collect();
        if occupied.len() > 1 {
            prop_assert_eq!(lut.map[occupied[0]], 0);
            prop_assert_eq!(lut.map[*occupied.last().unwrap()], 255);
        } else {
            prop_assert_eq!(lut, facepipe::colornorm::EqualizationLut::identity());
        }
    }

    #[test]
    fn equalize_applies_the_channel_luts(img in image_strategy()) {
        let luts = channel_luts(&img);
        let out = equalize(&img);
        for (i, (&a, &b)) in img.as_raw().iter().zip(out.as_raw()).enumerate() {
            prop_assert_eq!(luts[i % 3].apply(a), b);
        }
    }

    #[test]
    fn channels_are_independent(img in image_strategy(), noise in any::<u64>()) {
        // Scramble the blue channel; red and green outputs must not change.
        let mut other = img.clone();
        let mut state = noise | 1;
        for s in other.as_raw_mut().iter_mut().skip(2).step_by(3) {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            *s = state as u8;
        }
        let (a, b) = (equalize(&img), equalize(&other));
        for (i, (x, y)) in a.as_raw().iter().zip(b.as_raw()).enumerate() {
            if i % 3 != 2 {
                prop_assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn equalization_is_idempotent_on_its_output_ranks(img in image_strategy()) {
        // Equalizing preserves the order of samples within each channel.
        let out = equalize(&img);
        for ch in 0..3 {
            let pairs: Vec<(u8, u8)> = img.as_raw().iter().zip(out.as_raw()).skip(ch).step_by(3).map(|(&a, &b)| (a, b)).collect();
            for &(a1, b1) in &pairs {
                for &(a2, b2) in &pairs {
                    if a1 < a2 {
                        prop_assert!(b1 <= b2);
                    }
                }
            }
        }
    }
}

#[test]
fn empty_histogram_is_an_error() {
    assert!(build_lut(&ChannelHistogram { counts: [0; 256] }).is_err());
}

#[test]
fn histogram_csv_has_header_and_256_rows() {
    let img = ImageBuffer::from_fn(4, 4, |c, r| [c as u8, r as u8, 9]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    facepipe::colornorm::write_histogram_csv(&img, &path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "bin,countR,countG,countB");
    assert_eq!(lines.len(), 257);
    assert_eq!(lines[1], "0,4,4,0");
    assert_eq!(lines[10], "9,0,0,16");
}

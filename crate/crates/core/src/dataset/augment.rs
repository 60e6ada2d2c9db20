use ndarray::{s, Array3, Axis};

use super::LabeledExample;

/// Mirrors every channel left-to-right.
pub fn flip_horizontal(pixels: &Array3<f32>) -> Array3<f32> {
    pixels.slice(s![.., .., ..;-1]).as_standard_layout().into_owned()
}

/// Training-time augmentation.
///
/// Mono frames yield the original and its horizontal mirror. Stereo frames
/// yield the original and the pair obtained by swapping left and right and
/// mirroring each view, which is again a geometrically valid stereo pair.
pub fn augment(example: &LabeledExample) -> Vec<LabeledExample> {
    let px = &example.frame.pixels;
    let mirrored = if example.frame.is_stereo() {
        let left = px.slice(s![0..3, .., ..]);
        let right = px.slice(s![3..6, .., ..]);
        let new_left = flip_horizontal(&right.to_owned());
        let new_right = flip_horizontal(&left.to_owned());
        ndarray::concatenate(Axis(0), &[new_left.view(), new_right.view()]).expect("3+3 channels")
    } else {
        flip_horizontal(px)
    };
    let mut aug = example.clone();
    aug.frame.pixels = mirrored;
    vec![example.clone(), aug]
}

#[cfg(test)]
mod tests {
    use super::super::{Frame, TraversabilityLabel};
    use super::*;

    fn example(c: usize) -> LabeledExample {
        let px = Array3::from_shape_fn((c, 4, 5), |(c, y, x)| (c * 100 + y * 10 + x) as f32 / 500.0);
        LabeledExample { frame: Frame::new(px, "env"), label: TraversabilityLabel::hand(false) }
    }

    #[test]
    fn mono_flip_is_an_involution() {
        let e = example(3);
        let out = augment(&e);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], e);
        assert_eq!(flip_horizontal(&out[1].frame.pixels), e.frame.pixels);
        assert!(out.iter().all(|o| o.label == e.label));
    }

    #[test]
    fn stereo_swaps_then_flips() {
        let e = example(6);
        let out = augment(&e);
        let right = e.frame.pixels.slice(s![3..6, .., ..]).to_owned();
        assert_eq!(out[1].frame.pixels.slice(s![0..3, .., ..]), flip_horizontal(&right));
        assert_eq!(out[1].label, e.label);
    }

    #[test]
    fn symmetric_image_is_a_fixed_point() {
        let px = Array3::from_shape_fn((3, 4, 6), |(c, y, x)| {
            let m = x.min(5 - x);
            (c + y + m) as f32 / 10.0
        });
        let e = LabeledExample { frame: Frame::new(px, "e"), label: TraversabilityLabel::hand(true) };
        assert_eq!(augment(&e)[1], e);
    }
}

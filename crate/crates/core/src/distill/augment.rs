use rand::Rng;

use crate::tensor::Tensor;

/// Quarter turns and optional horizontal flip of a `[C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Augment {
    pub const IDENTITY: Augment = Augment { quarter_turns: 0, flip: false };

    pub fn sample(rng: &mut impl Rng, rotate: bool, flip: bool) -> Self {
        Self {
            quarter_turns: if rotate { rng.random_range(0..4) } else { 0 },
            flip: flip && rng.random::<bool>(),
        }
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        if self.flip {
            out = flip_horizontal(&out);
        }
        for _ in 0..self.quarter_turns {
            out = rotate90(&out);
        }
        out
    }
}

pub fn flip_horizontal(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[1], s[2]);
    Tensor::from_fn(s, |i| {
        let (c, y, xx) = (i / (h * w), (i / w) % h, i % w);
        x.data()[(c * h + y) * w + (w - 1 - xx)]
    })
}

/// Counter-clockwise quarter turn: `[C, H, W]` to `[C, W, H]`.
pub fn rotate90(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    Tensor::from_fn(&[c, w, h], |i| {
        let (ch, y, xx) = (i / (w * h), (i / h) % w, i % h);
        x.data()[(ch * h + xx) * w + (w - 1 - y)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_turns_and_double_flip_are_identity() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f32);
        let mut r = x.clone();
        for _ in 0..4 {
            r = rotate90(&r);
        }
        assert_eq!(r, x);
        assert_eq!(flip_horizontal(&flip_horizontal(&x)), x);
    }

    #[test]
    fn quarter_turn_moves_corners() {
        // [[0, 1], [2, 3]] turned counter-clockwise is [[1, 3], [0, 2]].
        let x = Tensor::new(vec![1, 2, 2], vec![0., 1., 2., 3.]).unwrap();
        assert_eq!(rotate90(&x).data(), &[1., 3., 0., 2.]);
    }
}

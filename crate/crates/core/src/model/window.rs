//! Index maps for window attention over a `[H·W, C]` token layout.
//!
//! Every rearrangement in the attention block is a pure permutation, so it
//! is expressed as a gather index and differentiated by the tape's gather op.

use crate::error::{Error, Result};

const MASK_VALUE: f32 = -100.0;

fn check_divisible(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} feature not divisible into {m}x{m} windows"
        )));
    }
    Ok(())
}

/// Source token of position `(wy·m + py, wx·m + px)` after a cyclic shift
/// of the feature by `-shift` along both axes.
fn shifted_token(h: usize, w: usize, y: usize, x: usize, shift: usize) -> usize {
    ((y + shift) % h) * w + (x + shift) % w
}

/// Gather map from tokens `[H·W, C]` to windows `[nW, M², C]`.
pub fn partition_index(h: usize, w: usize, c: usize, m: usize, shift: usize) -> Result<Vec<u32>> {
    check_divisible(h, w, m)?;
    let (nwx, n) = (w / m, m * m);
    let num_windows = (h / m) * nwx;
    let mut index = Vec::with_capacity(num_windows * n * c);
    for win in 0..num_windows {
        let (wy, wx) = (win / nwx, win % nwx);
        for t in 0..n {
            let (py, px) = (t / m, t % m);
            let src = shifted_token(h, w, wy * m + py, wx * m + px, shift);
            index.extend((0..c).map(|ch| (src * c + ch) as u32));
        }
    }
    Ok(index)
}

/// Gather map from windows `[nW, M², C]` back to tokens `[H·W, C]`, undoing
/// the shift. Inverse of [`partition_index`].
pub fn reverse_index(h: usize, w: usize, c: usize, m: usize, shift: usize) -> Result<Vec<u32>> {
    let fwd = partition_index(h, w, c, m, shift)?;
    Ok(crate::autodiff::kernels::invert_permutation(&fwd))
}

/// Additive attention mask `[nW, M², M²]` for shifted windows: tokens that
/// came from different regions of the unshifted image may not attend to
/// each other. All zeros when `shift == 0`.
pub fn attention_mask(h: usize, w: usize, m: usize, shift: usize) -> Result<Vec<f32>> {
    check_divisible(h, w, m)?;
    let (nwx, n) = (w / m, m * m);
    let num_windows = (h / m) * nwx;
    let mut mask = vec![0.0f32; num_windows * n * n];
    if shift == 0 {
        return Ok(mask);
    }
    let region = |pos: usize, extent: usize| -> usize {
        if pos < extent - m {
            0
        } else if pos < extent - shift {
            1
        } else {
            2
        }
    };
    for win in 0..num_windows {
        let (wy, wx) = (win / nwx, win % nwx);
        let label = |t: usize| {
            let (y, x) = (wy * m + t / m, wx * m + t % m);
            region(y, h) * 3 + region(x, w)
        };
        let labels: Vec<usize> = (0..n).map(label).collect();
        let block = &mut mask[win * n * n..(win + 1) * n * n];
        for i in 0..n {
            for j in 0..n {
                if labels[i] != labels[j] {
                    block[i * n + j] = MASK_VALUE;
                }
            }
        }
    }
    Ok(mask)
}

/// Row of the `(2M−1)²`-entry bias table for each query/key pair in a window.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let mut index = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / m) as isize - (j / m) as isize + m as isize - 1;
            let dx = (i % m) as isize - (j % m) as isize + m as isize - 1;
            index.push(dy as usize * (2 * m - 1) + dx as usize);
        }
    }
    index
}

/// Expands a bias table `[(2M−1)², heads]` to `[heads, M², M²]`.
pub fn expand_position_bias(table: &[f32], m: usize, heads: usize) -> Vec<f32> {
    let rel = relative_position_index(m);
    let nn = rel.len();
    let mut out = vec![0.0f32; heads * nn];
    for h in 0..heads {
        for (k, &r) in rel.iter().enumerate() {
            out[h * nn + k] = table[r * heads + h];
        }
    }
    out
}

/// Gather map selecting part `p` (0 = q, 1 = k, 2 = v) of a fused
/// `[nW·N, 3C]` projection and splitting heads: result `[nW·heads, N, d]`.
pub fn head_split_index(num_windows: usize, n: usize, heads: usize, d: usize, part: usize) -> Vec<u32> {
    let c = heads * d;
    let mut index = Vec::with_capacity(num_windows * heads * n * d);
    for win in 0..num_windows {
        for hd in 0..heads {
            for t in 0..n {
                let row = (win * n + t) * 3 * c + part * c + hd * d;
                index.extend((0..d).map(|j| (row + j) as u32));
            }
        }
    }
    index
}

/// Gather map merging heads `[nW·heads, N, d]` into `[nW·N, C]`.
pub fn head_merge_index(num_windows: usize, n: usize, heads: usize, d: usize) -> Vec<u32> {
    let mut index = Vec::with_capacity(num_windows * n * heads * d);
    for win in 0..num_windows {
        for t in 0..n {
            for hd in 0..heads {
                let src = ((win * heads + hd) * n + t) * d;
                index.extend((0..d).map(|j| (src + j) as u32));
            }
        }
    }
    index
}

/// Gather map from a `[C, H, W]` image to `[H·W, C]` tokens.
pub fn chw_to_tokens_index(c: usize, h: usize, w: usize) -> Vec<u32> {
    let mut index = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        index.extend((0..c).map(|ch| (ch * h * w + p) as u32));
    }
    index
}

/// Gather map from `[H·W, C]` tokens to a `[C, H, W]` image.
pub fn tokens_to_chw_index(c: usize, h: usize, w: usize) -> Vec<u32> {
    let mut index = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        index.extend((0..h * w).map(|p| (p * c + ch) as u32));
    }
    index
}

/// Gather map reflect-padding `[C, H, W]` on the bottom and right to
/// `[C, H + ph, W + pw]`, mirroring without repeating the edge.
pub fn reflect_pad_index(c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Result<Vec<u32>> {
    if (ph > 0 && ph >= h) || (pw > 0 && pw >= w) {
        return Err(Error::InvalidArgument(format!(
            "resolution {h}x{w} too small to pad by {ph}x{pw}"
        )));
    }
    let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let (hp, wp) = (h + ph, w + pw);
    let mut index = Vec::with_capacity(c * hp * wp);
    for ch in 0..c {
        for y in 0..hp {
            let sy = reflect(y, h);
            index.extend((0..wp).map(|x| ((ch * h + sy) * w + reflect(x, w)) as u32));
        }
    }
    Ok(index)
}

/// Gather map cropping `[C, H, W]` to its top-left `[C, h, w]`.
pub fn crop_index(c: usize, h_full: usize, w_full: usize, h: usize, w: usize) -> Vec<u32> {
    let mut index = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            index.extend((0..w).map(|x| ((ch * h_full + y) * w_full + x) as u32));
        }
    }
    index
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn apply(index: &[u32], src: &[f32]) -> Vec<f32> {
        index.iter().map(|&i| src[i as usize]).collect()
    }

    #[test]
    fn four_by_four_two_windows() {
        let src: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let idx = partition_index(4, 4, 1, 2, 0).unwrap();
        let win = apply(&idx, &src);
        assert_eq!(
            win,
            vec![
                0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.
            ]
        );
    }

    #[test]
    fn shifted_partition_rolls_first() {
        let src: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let win = apply(&partition_index(4, 4, 1, 2, 1).unwrap(), &src);
        // Window 0 starts at (1,1) of the original.
        assert_eq!(&win[..4], &[5., 6., 9., 10.]);
        // Last window wraps around both axes.
        assert_eq!(&win[12..], &[15., 12., 3., 0.]);
    }

    #[test]
    fn unshifted_mask_is_zero_and_shifted_masks_boundaries() {
        assert!(attention_mask(8, 8, 4, 0).unwrap().iter().all(|&v| v == 0.0));
        let m = attention_mask(8, 8, 4, 2).unwrap();
        let n = 16;
        // The first window lies entirely in one region.
        assert!(m[..n * n].iter().all(|&v| v == 0.0));
        // The last window mixes four regions: token 0 vs token 15 are apart.
        let last = &m[3 * n * n..];
        assert_eq!(last[15], MASK_VALUE);
        assert_eq!(last[0], 0.0);
        for i in 0..n {
            for j in 0..n {
                assert_eq!(last[i * n + j], last[j * n + i]);
            }
        }
    }

    #[test]
    fn relative_index_spans_table() {
        let m = 3;
        let idx = relative_position_index(m);
        assert_eq!(idx.len(), 81);
        assert!(idx.iter().all(|&i| i < 25));
        // Diagonal has zero offset: centre of the table.
        for t in 0..9 {
            assert_eq!(idx[t * 9 + t], 12);
        }
        assert_eq!(*idx.iter().max().unwrap(), 24);
        assert_eq!(*idx.iter().min().unwrap(), 0);
    }

    #[test]
    fn head_split_and_merge() {
        let (nw, n, heads, d) = (2, 3, 2, 2);
        let c = heads * d;
        let qkv: Vec<f32> = (0..nw * n * 3 * c).map(|v| v as f32).collect();
        let v = apply(&head_split_index(nw, n, heads, d, 2), &qkv);
        // Window 0, head 1, token 0: row 0, columns 2C + d .. 2C + 2d.
        assert_eq!(&v[n * d..n * d + 2], &[10., 11.]);
        let merged = apply(&head_merge_index(nw, n, heads, d), &v);
        let expect: Vec<f32> = (0..nw * n)
            .flat_map(|r| (0..c).map(move |j| (r * 3 * c + 2 * c + j) as f32))
            .collect();
        assert_eq!(merged, expect);
    }

    #[test]
    fn reflect_pad_mirrors_interior() {
        let src: Vec<f32> = (0..3).map(|v| v as f32).collect();
        let out = apply(&reflect_pad_index(1, 1, 3, 0, 2).unwrap(), &src);
        assert_eq!(out, vec![0., 1., 2., 1., 0.]);
        assert!(reflect_pad_index(1, 2, 2, 2, 0).is_err());
    }

    #[test]
    fn indivisible_rejected() {
        assert!(partition_index(6, 8, 1, 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_round_trip(
            wy in 1usize..4, wx in 1usize..4, m in 2usize..5, c in 1usize..4, shifted in any::<bool>()
        ) {
            let (h, w) = (wy * m, wx * m);
            let shift = if shifted { m / 2 } else { 0 };
            let src: Vec<f32> = (0..h * w * c).map(|v| v as f32).collect();
            let win = apply(&partition_index(h, w, c, m, shift).unwrap(), &src);
            let back = apply(&reverse_index(h, w, c, m, shift).unwrap(), &win);
            prop_assert_eq!(back, src);
        }

        #[test]
        fn token_layout_round_trip(c in 1usize..5, h in 1usize..6, w in 1usize..6) {
            let src: Vec<f32> = (0..c * h * w).map(|v| v as f32).collect();
            let t = apply(&chw_to_tokens_index(c, h, w), &src);
            prop_assert_eq!(apply(&tokens_to_chw_index(c, h, w), &t), src);
        }
    }
}

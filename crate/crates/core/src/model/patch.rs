//! Conversion between videos `(B, F, H, W, C)` and token sequences
//! `(B, N, pf·ph·pw·C)`. Tokens are ordered frame-major, then row, then
//! column; each token's features are ordered `(pf, ph, pw, C)`.

use cost_tensor::{Element, Tensor};

use crate::error::{Error, Result};

fn video_dims<T: Element>(video: &Tensor<T>) -> Result<[usize; 5]> {
    match *video.shape() {
        [b, f, h, w, c] => Ok([b, f, h, w, c]),
        _ => Err(Error::Shape(format!(
            "expected a (B, F, H, W, C) video, got {:?}",
            video.shape()
        ))),
    }
}

/// Splits a video into patch tokens and returns them with the token grid.
pub fn patchify<T: Element>(video: &Tensor<T>, patch: [usize; 3]) -> Result<(Tensor<T>, [usize; 3])> {
    let [b, f, h, w, c] = video_dims(video)?;
    let [pf, ph, pw] = patch;
    if pf == 0 || ph == 0 || pw == 0 || f % pf != 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::Shape(format!(
            "video extents ({f}, {h}, {w}) not divisible by patch {patch:?}"
        )));
    }
    let grid = [f / pf, h / ph, w / pw];
    let n = grid.iter().product::<usize>();
    let feat = pf * ph * pw * c;
    let src = video.data();
    let mut out = Vec::with_capacity(b * n * feat);
    for bi in 0..b {
        for tf in 0..grid[0] {
            for th in 0..grid[1] {
                for tw in 0..grid[2] {
                    for df in 0..pf {
                        for dh in 0..ph {
                            for dw in 0..pw {
                                let (fi, hi, wi) = (tf * pf + df, th * ph + dh, tw * pw + dw);
                                let base = (((bi * f + fi) * h + hi) * w + wi) * c;
                                out.extend_from_slice(&src[base..base + c]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new([b, n, feat], out)?, grid))
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Element>(
    tokens: &Tensor<T>,
    grid: [usize; 3],
    patch: [usize; 3],
    channels: usize,
) -> Result<Tensor<T>> {
    let [pf, ph, pw] = patch;
    let n = grid.iter().product::<usize>();
    let feat = pf * ph * pw * channels;
    let b = match *tokens.shape() {
        [b, tn, tf] if tn == n && tf == feat => b,
        _ => {
            return Err(Error::Shape(format!(
                "token tensor {:?} does not match grid {grid:?} with {feat} features",
                tokens.shape()
            )))
        }
    };
    let (f, h, w) = (grid[0] * pf, grid[1] * ph, grid[2] * pw);
    let mut out = vec![T::zero(); b * f * h * w * channels];
    let mut src = tokens.data().chunks_exact(channels);
    for bi in 0..b {
        for tf in 0..grid[0] {
            for th in 0..grid[1] {
                for tw in 0..grid[2] {
                    for df in 0..pf {
                        for dh in 0..ph {
                            for dw in 0..pw {
                                let (fi, hi, wi) = (tf * pf + df, th * ph + dh, tw * pw + dw);
                                let base = (((bi * f + fi) * h + hi) * w + wi) * channels;
                                out[base..base + channels].copy_from_slice(src.next().expect("token count"));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new([b, f, h, w, channels], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cost_tensor::Rng;

    #[test]
    fn token_counts() {
        let v = Tensor::<f32>::zeros([1, 8, 5, 5, 4]).unwrap();
        let (t, grid) = patchify(&v, [1, 1, 1]).unwrap();
        assert_eq!((t.shape()[1], grid), (200, [8, 5, 5]));
        let (t, grid) = patchify(&v, [2, 1, 1]).unwrap();
        assert_eq!((t.shape()[1], grid), (100, [4, 5, 5]));
        assert!(patchify(&v, [3, 1, 1]).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let v: Tensor<f32> = Rng::new(1).gaussian([2, 4, 2, 6, 3]).unwrap();
        for patch in [[1, 1, 1], [2, 1, 1], [2, 2, 3], [4, 2, 1]] {
            let (t, grid) = patchify(&v, patch).unwrap();
            assert_eq!(unpatchify(&t, grid, patch, 3).unwrap(), v);
        }
    }

    #[test]
    fn arrangement_matters_and_zeros_stay_zero() {
        let v: Tensor<f32> = Rng::new(2).gaussian([1, 2, 2, 2, 1]).unwrap();
        let (t, grid) = patchify(&v, [1, 1, 1]).unwrap();
        let mut permuted = t.clone();
        permuted.data_mut().reverse();
        assert_ne!(unpatchify(&permuted, grid, [1, 1, 1], 1).unwrap(), v);

        let z = Tensor::<f32>::zeros([1, 8, 1]).unwrap();
        let out = unpatchify(&z, [2, 2, 2], [1, 1, 1], 1).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert!(unpatchify(&z, [2, 2, 1], [1, 1, 1], 1).is_err());
    }
}

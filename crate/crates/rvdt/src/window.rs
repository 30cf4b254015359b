//! Non-overlapping window partition and reverse.
//!
//! Windows are ordered row-major over `(t, y, x)` window indices, and tokens
//! inside a window row-major over `(t, y, x)` offsets. Each token carries
//! the `C` channel values of its position.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `C x h x w` into `windows x (a*a) x C`.
pub fn partition_2d(x: &Tensor, a: usize) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let t = Tensor {
        shape: vec![1, c, h, w],
        data: x.data.clone(),
    };
    let mut out = partition_3d(&t, (1, a, a))?;
    out.shape = vec![out.shape[0], a * a, c];
    Ok(out)
}

pub fn reverse_2d(tokens: &Tensor, c: usize, h: usize, w: usize, a: usize) -> Result<Tensor> {
    let mut x = reverse_3d(tokens, 1, c, h, w, (1, a, a))?;
    x.shape = vec![c, h, w];
    Ok(x)
}

fn check_divides(t: usize, h: usize, w: usize, win: (usize, usize, usize)) -> Result<()> {
    let (wt, wa, wb) = win;
    if wt == 0 || wa == 0 || wb == 0 || !t.is_multiple_of(wt) || !h.is_multiple_of(wa) || !w.is_multiple_of(wb) {
        return Err(Error::Shape(format!(
            "window {wt}x{wa}x{wb} does not tile {t}x{h}x{w}"
        )));
    }
    Ok(())
}

/// `T x C x h x w` into `windows x (t*a*b) x C`.
pub fn partition_3d(x: &Tensor, win: (usize, usize, usize)) -> Result<Tensor> {
    let [t, c, h, w] = x.shape[..] else {
        return Err(Error::Shape(format!("expected T x C x H x W, got {:?}", x.shape)));
    };
    check_divides(t, h, w, win)?;
    let (wt, wa, wb) = win;
    let (nt, ny, nx) = (t / wt, h / wa, w / wb);
    let n = wt * wa * wb;
    let mut out = vec![0f32; x.data.len()];
    for it in 0..nt {
        for iy in 0..ny {
            for ix in 0..nx {
                let widx = (it * ny + iy) * nx + ix;
                for dt in 0..wt {
                    for dy in 0..wa {
                        for dx in 0..wb {
                            let tok = (dt * wa + dy) * wb + dx;
                            let (ft, fy, fx) = (it * wt + dt, iy * wa + dy, ix * wb + dx);
                            let dst = (widx * n + tok) * c;
                            for ch in 0..c {
                                out[dst + ch] = x.data[((ft * c + ch) * h + fy) * w + fx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![nt * ny * nx, n, c],
        data: out,
    })
}

pub fn reverse_3d(tokens: &Tensor, t: usize, c: usize, h: usize, w: usize, win: (usize, usize, usize)) -> Result<Tensor> {
    check_divides(t, h, w, win)?;
    let (wt, wa, wb) = win;
    let (nt, ny, nx) = (t / wt, h / wa, w / wb);
    let n = wt * wa * wb;
    tokens.ensure_shape(&[nt * ny * nx, n, c])?;
    let mut out = vec![0f32; tokens.data.len()];
    for it in 0..nt {
        for iy in 0..ny {
            for ix in 0..nx {
                let widx = (it * ny + iy) * nx + ix;
                for dt in 0..wt {
                    for dy in 0..wa {
                        for dx in 0..wb {
                            let tok = (dt * wa + dy) * wb + dx;
                            let (ft, fy, fx) = (it * wt + dt, iy * wa + dy, ix * wb + dx);
                            let src = (widx * n + tok) * c;
                            for ch in 0..c {
                                out[((ft * c + ch) * h + fy) * w + fx] = tokens.data[src + ch];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![t, c, h, w],
        data: out,
    })
}

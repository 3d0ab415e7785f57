//! Stride-1 "same"-padded convolution over one to three spatial axes,
//! lowered to GEMM through an all-batch im2col buffer.

use crate::error::{shape_err, Result};
use crate::gemm::gemm;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub spatial: [usize; 3],
    pub kernel: [usize; 3],
}

impl ConvGeom {
    /// Input `[B, Cin, s...]`, weight `[Cout, Cin, k...]` with matching rank.
    pub fn infer(x: &[usize], w: &[usize]) -> Result<Self> {
        if x.len() < 3 || x.len() > 5 || w.len() != x.len() {
            return shape_err(
                "conv",
                format!("input {x:?} and kernel {w:?} must share rank 3..=5"),
            );
        }
        if w[1] != x[1] {
            return shape_err(
                "conv",
                format!("channel mismatch: input has {}, kernel expects {}", x[1], w[1]),
            );
        }
        let nd = x.len() - 2;
        let mut spatial = [1; 3];
        let mut kernel = [1; 3];
        for d in 0..nd {
            spatial[3 - nd + d] = x[2 + d];
            kernel[3 - nd + d] = w[2 + d];
        }
        if kernel.iter().any(|k| k % 2 == 0) {
            return shape_err("conv", format!("same padding needs odd kernels, got {w:?}"));
        }
        Ok(Self {
            batch: x[0],
            cin: x[1],
            cout: w[0],
            spatial,
            kernel,
        })
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn positions(&self) -> usize {
        self.spatial.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.taps()
    }

    fn col_cols(&self) -> usize {
        self.batch * self.positions()
    }
}

/// Walks every (column row, batch, output position, input position) pair
/// whose input position lies inside the padded volume.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize)) {
    let [s0, s1, s2] = g.spatial;
    let [k0, k1, k2] = g.kernel;
    let (p0, p1, p2) = ((k0 / 2) as isize, (k1 / 2) as isize, (k2 / 2) as isize);
    let positions = g.positions();
    let ncols = g.col_cols();
    for ci in 0..g.cin {
        for t0 in 0..k0 {
            for t1 in 0..k1 {
                for t2 in 0..k2 {
                    let row = ((ci * k0 + t0) * k1 + t1) * k2 + t2;
                    let row_base = row * ncols;
                    let d2 = t2 as isize - p2;
                    let lo2 = (-d2).max(0) as usize;
                    let hi2 = (s2 as isize - d2).min(s2 as isize).max(0) as usize;
                    for b in 0..g.batch {
                        let in_base = (b * g.cin + ci) * positions;
                        let col_base = row_base + b * positions;
                        for o0 in 0..s0 {
                            let i0 = o0 as isize + t0 as isize - p0;
                            if i0 < 0 || i0 >= s0 as isize {
                                continue;
                            }
                            for o1 in 0..s1 {
                                let i1 = o1 as isize + t1 as isize - p1;
                                if i1 < 0 || i1 >= s1 as isize {
                                    continue;
                                }
                                let out_row = (o0 * s1 + o1) * s2;
                                let in_row = (i0 as usize * s1 + i1 as usize) * s2;
                                for o2 in lo2..hi2 {
                                    let i2 = (o2 as isize + d2) as usize;
                                    f(col_base + out_row + o2, in_base + in_row + i2);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    for_each_tap(g, |c, i| col[c] = x[i]);
    col
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    for_each_tap(g, |c, i| dx[i] += col[c]);
}

pub(crate) fn forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let col = im2col(g, x);
    let (rows, cols, s) = (g.col_rows(), g.col_cols(), g.positions());
    let mut tmp = vec![0.0; g.cout * cols];
    gemm(g.cout, rows, cols, w, false, &col, false, &mut tmp, 0.0);
    let mut y = vec![0.0; g.batch * g.cout * s];
    for co in 0..g.cout {
        let b0 = bias.map_or(0.0, |b| b[co]);
        for b in 0..g.batch {
            let src = &tmp[co * cols + b * s..co * cols + (b + 1) * s];
            let dst = &mut y[(b * g.cout + co) * s..(b * g.cout + co + 1) * s];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = v + b0;
            }
        }
    }
    y
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (rows, cols, s) = (g.col_rows(), g.col_cols(), g.positions());
    let mut dtmp = vec![0.0; g.cout * cols];
    for co in 0..g.cout {
        for b in 0..g.batch {
            dtmp[co * cols + b * s..co * cols + (b + 1) * s]
                .copy_from_slice(&dy[(b * g.cout + co) * s..(b * g.cout + co + 1) * s]);
        }
    }
    let db = need.2.then(|| {
        (0..g.cout)
            .map(|co| dtmp[co * cols..(co + 1) * cols].iter().sum())
            .collect()
    });
    let dw = need.1.then(|| {
        let col = im2col(g, x);
        let mut dw = vec![0.0; g.cout * rows];
        gemm(g.cout, cols, rows, &dtmp, false, &col, true, &mut dw, 0.0);
        dw
    });
    let dx = need.0.then(|| {
        let mut dcol = vec![0.0; rows * cols];
        gemm(rows, g.cout, cols, w, true, &dtmp, false, &mut dcol, 0.0);
        let mut dx = vec![0.0; x.len()];
        col2im(g, &dcol, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

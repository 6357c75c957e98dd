//! Plain-loop dense kernels. Loop orders are chosen so the innermost loop runs
//! over contiguous memory.

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    fn patch(&self) -> usize {
        self.group_in() * self.kernel * self.kernel
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let positions = oh * ow;
    for c in 0..g.group_in() {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            plane[iy as usize * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let positions = oh * ow;
    for c in 0..g.group_in() {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            plane[iy as usize * g.width + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let positions = oh * ow;
    let (gi, go, patch) = (g.group_in(), g.group_out(), g.patch());
    let in_plane = g.height * g.width;
    let mut out = vec![0.0; g.batch * g.out_channels * positions];
    let mut cols = vec![0.0; patch * positions];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let xs = &x[(b * g.in_channels + grp * gi) * in_plane..][..gi * in_plane];
            im2col(g, xs, &mut cols);
            let wg = &w[grp * go * patch..(grp + 1) * go * patch];
            let dst = &mut out[(b * g.out_channels + grp * go) * positions..][..go * positions];
            gemm_nn(wg, &cols, dst, go, patch, positions);
        }
        if let Some(bias) = bias {
            for o in 0..g.out_channels {
                let dst = &mut out[(b * g.out_channels + o) * positions..][..positions];
                for v in dst {
                    *v += bias[o];
                }
            }
        }
    }
    out
}

/// Returns gradients with respect to (input, weight, bias); each is computed
/// only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    want: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (oh, ow) = g.out_hw();
    let positions = oh * ow;
    let (gi, go, patch) = (g.group_in(), g.group_out(), g.patch());
    let in_plane = g.height * g.width;
    let mut dx = want.0.then(|| vec![0.0; x.len()]);
    let mut dw = want.1.then(|| vec![0.0; w.len()]);
    let db = want.2.then(|| {
        let mut db = vec![0.0; g.out_channels];
        for b in 0..g.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dout[(b * g.out_channels + o) * positions..][..positions]
                    .iter()
                    .sum::<f64>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }
    let mut cols = vec![0.0; patch * positions];
    let mut dcols = vec![0.0; patch * positions];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let x_off = (b * g.in_channels + grp * gi) * in_plane;
            let dy = &dout[(b * g.out_channels + grp * go) * positions..][..go * positions];
            let wg = &w[grp * go * patch..(grp + 1) * go * patch];
            if let Some(dw) = dw.as_mut() {
                im2col(g, &x[x_off..x_off + gi * in_plane], &mut cols);
                gemm_nt(dy, &cols, &mut dw[grp * go * patch..(grp + 1) * go * patch], go, positions, patch);
            }
            if let Some(dx) = dx.as_mut() {
                dcols.iter_mut().for_each(|v| *v = 0.0);
                gemm_tn(wg, dy, &mut dcols, patch, go, positions);
                col2im(g, &dcols, &mut dx[x_off..x_off + gi * in_plane]);
            }
        }
    }
    (dx, dw, db)
}

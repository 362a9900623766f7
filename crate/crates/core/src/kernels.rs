//! Direct 3D convolution kernels.
//!
//! Three routines cover forward and backward of both `conv3d` and
//! `conv_transpose3d`: the transpose forward *is* the convolution's
//! input-gradient, so adjointness holds by construction.
//!
//! Weight layout: `[c_out, c_in, k, k, k]` for convolution. The transpose
//! reuses the same layout with the roles of `c_out`/`c_in` swapped, i.e.
//! a transpose layer mapping `a -> b` channels stores weights `[a, b, k³]`.

pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

pub fn conv_transpose_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n - 1) * stride + k - 2 * pad
}

/// Valid output range along one axis: the `o` with `0 <= o*s - p + kk < n`.
#[inline]
fn valid_out_range(n_in: usize, n_out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let s = stride as isize;
    let off = kk as isize - pad as isize;
    let lo = (-off).div_euclid(s).max(0).min(n_out as isize);
    // smallest lo with lo*s + off >= 0
    let lo = if lo * s + off < 0 { lo + 1 } else { lo };
    let hi = ((n_in as isize - 1 - off).div_euclid(s) + 1).clamp(0, n_out as isize);
    (lo.max(0) as usize, hi.max(lo.max(0)) as usize)
}

/// y[co, o] = sum_{ci, kappa} w[co, ci, kappa] * x[ci, o*s - p + kappa]
///
/// Structured as row accumulations (one kernel tap at a time) so the inner
/// loop over contiguous output rows vectorizes.
pub fn conv_fwd(
    x: &[f32],
    in_dims: (usize, usize, usize),
    c_in: usize,
    w: &[f32],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    y: &mut [f32],
) {
    let (di, hi, wi) = in_dims;
    let (do_, ho, wo) = (
        conv_out_dim(di, k, stride, pad),
        conv_out_dim(hi, k, stride, pad),
        conv_out_dim(wi, k, stride, pad),
    );
    debug_assert_eq!(y.len(), c_out * do_ * ho * wo);
    let in_ch = di * hi * wi;
    let out_ch = do_ * ho * wo;
    for v in y.iter_mut() {
        *v = 0.0;
    }
    for co in 0..c_out {
        let y_co = &mut y[co * out_ch..(co + 1) * out_ch];
        for ci in 0..c_in {
            let x_ci = &x[ci * in_ch..(ci + 1) * in_ch];
            let wbase = (co * c_in + ci) * k * k * k;
            for kz in 0..k {
                let (oz_lo, oz_hi) = valid_out_range(di, do_, kz, stride, pad);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_out_range(hi, ho, ky, stride, pad);
                    for kx in 0..k {
                        let wv = w[wbase + (kz * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_out_range(wi, wo, kx, stride, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oz in oz_lo..oz_hi {
                            let z = oz * stride + kz - pad;
                            for oy in oy_lo..oy_hi {
                                let yy = oy * stride + ky - pad;
                                let xrow = &x_ci[(z * hi + yy) * wi..(z * hi + yy + 1) * wi];
                                let yrow =
                                    &mut y_co[(oz * ho + oy) * wo + ox_lo..(oz * ho + oy) * wo + ox_hi];
                                let x0 = ox_lo * stride + kx - pad;
                                if stride == 1 {
                                    let xs = &xrow[x0..x0 + yrow.len()];
                                    for (yv, &xv) in yrow.iter_mut().zip(xs) {
                                        *yv += wv * xv;
                                    }
                                } else {
                                    for (i, yv) in yrow.iter_mut().enumerate() {
                                        *yv += wv * xrow[x0 + i * stride];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// gx[ci, z] = sum_{co, kappa} w[co, ci, kappa] * gy[co, o] where
/// z = o*s - p + kappa. Also the forward pass of conv_transpose3d.
#[allow(clippy::too_many_arguments)]
pub fn conv_bwd_input(
    gy: &[f32],
    out_dims: (usize, usize, usize),
    c_out: usize,
    w: &[f32],
    c_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    in_dims: (usize, usize, usize),
    gx: &mut [f32],
) {
    let (do_, ho, wo) = out_dims;
    let (di, hi, wi) = in_dims;
    debug_assert_eq!(gx.len(), c_in * di * hi * wi);
    let out_ch = do_ * ho * wo;
    let in_ch = di * hi * wi;
    // Scatter per (ci, co, kernel tap) over whole rows; accumulation order
    // is fixed so results are deterministic.
    for g in gx.iter_mut() {
        *g = 0.0;
    }
    for ci in 0..c_in {
        let gx_ci = &mut gx[ci * in_ch..(ci + 1) * in_ch];
        for co in 0..c_out {
            let gy_co = &gy[co * out_ch..(co + 1) * out_ch];
            let wbase = (co * c_in + ci) * k * k * k;
            for kz in 0..k {
                let (oz_lo, oz_hi) = valid_out_range(di, do_, kz, stride, pad);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_out_range(hi, ho, ky, stride, pad);
                    for kx in 0..k {
                        let wv = w[wbase + (kz * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_out_range(wi, wo, kx, stride, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oz in oz_lo..oz_hi {
                            let z = oz * stride + kz - pad;
                            for oy in oy_lo..oy_hi {
                                let yy = oy * stride + ky - pad;
                                let grow =
                                    &gy_co[(oz * ho + oy) * wo + ox_lo..(oz * ho + oy) * wo + ox_hi];
                                let xrow = &mut gx_ci[(z * hi + yy) * wi..(z * hi + yy + 1) * wi];
                                let x0 = ox_lo * stride + kx - pad;
                                if stride == 1 {
                                    let xs = &mut xrow[x0..x0 + grow.len()];
                                    for (xv, &gv) in xs.iter_mut().zip(grow) {
                                        *xv += wv * gv;
                                    }
                                } else {
                                    for (i, &gv) in grow.iter().enumerate() {
                                        xrow[x0 + i * stride] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// gw[co, ci, kappa] = sum_o gy[co, o] * x[ci, o*s - p + kappa]
#[allow(clippy::too_many_arguments)]
pub fn conv_bwd_weight(
    x: &[f32],
    in_dims: (usize, usize, usize),
    c_in: usize,
    gy: &[f32],
    out_dims: (usize, usize, usize),
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gw: &mut [f32],
) {
    let (di, hi, wi) = in_dims;
    let (do_, ho, wo) = out_dims;
    debug_assert_eq!(gw.len(), c_out * c_in * k * k * k);
    for g in gw.iter_mut() {
        *g = 0.0;
    }
    let out_ch = do_ * ho * wo;
    let in_ch = di * hi * wi;
    for co in 0..c_out {
        let gy_co = &gy[co * out_ch..(co + 1) * out_ch];
        for ci in 0..c_in {
            let x_ci = &x[ci * in_ch..(ci + 1) * in_ch];
            let wbase = (co * c_in + ci) * k * k * k;
            for kz in 0..k {
                let (oz_lo, oz_hi) = valid_out_range(di, do_, kz, stride, pad);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = valid_out_range(hi, ho, ky, stride, pad);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = valid_out_range(wi, wo, kx, stride, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        // accumulate the dot product in f64 so the tap sum
                        // does not depend on the row visit order precision
                        let mut acc = 0.0f64;
                        for oz in oz_lo..oz_hi {
                            let z = oz * stride + kz - pad;
                            for oy in oy_lo..oy_hi {
                                let yy = oy * stride + ky - pad;
                                let grow =
                                    &gy_co[(oz * ho + oy) * wo + ox_lo..(oz * ho + oy) * wo + ox_hi];
                                let xrow = &x_ci[(z * hi + yy) * wi..(z * hi + yy + 1) * wi];
                                let x0 = ox_lo * stride + kx - pad;
                                let mut row_acc = 0.0f32;
                                if stride == 1 {
                                    let xs = &xrow[x0..x0 + grow.len()];
                                    for (&gv, &xv) in grow.iter().zip(xs) {
                                        row_acc += gv * xv;
                                    }
                                } else {
                                    for (i, &gv) in grow.iter().enumerate() {
                                        row_acc += gv * xrow[x0 + i * stride];
                                    }
                                }
                                acc += row_acc as f64;
                            }
                        }
                        gw[wbase + (kz * k + ky) * k + kx] = acc as f32;
                    }
                }
            }
        }
    }
}

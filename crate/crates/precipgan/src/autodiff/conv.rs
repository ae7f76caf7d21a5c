//! Zero-padded 2D convolution forward/backward via im2col and dgemm.
//!
//! Layout is NCHW throughout. The im2col matrix is rebuilt during the
//! backward pass instead of being kept on the tape, trading ~25% extra
//! compute for a flat memory profile.

use ndarray::{Array1, Array4, ArrayView4};

/// Output spatial size for one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Row-major GEMM: `c = alpha * a(m,k) . b(k,n) + beta * c(m,n)`, with
/// explicit strides so transposed views cost nothing.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fills `cols` (shape `cin*kh*kw` x `oh*ow`, row-major) from one sample.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(cols.len(), cin * kh * kw * oh * ow);
    let plane = h * w;
    for c in 0..cin {
        let x_plane = &x[c * plane..(c + 1) * plane];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix >= 0 && (ix as usize) < w {
                            x_row[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into one input-gradient sample (inverse of
/// [`im2col`]).
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let plane = h * w;
    for c in 0..cin {
        let dx_plane = &mut dx[c * plane..(c + 1) * plane];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dx_row = &mut dx_plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x: (n, cin, h, w)`, `w: (cout, cin, kh, kw)`,
/// optional per-output-channel bias.
pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h, w) = x.dim();
    let (cout, wcin, kh, kw) = weight.dim();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad).expect("conv output collapses to zero");
    let ow = conv_out_dim(w, kw, stride, pad).expect("conv output collapses to zero");

    let x_slice = x.as_slice().expect("conv2d input must be contiguous");
    let w_slice = weight.as_slice().expect("conv2d weight must be contiguous");
    let kdim = cin * kh * kw;
    let pdim = oh * ow;
    let mut cols = vec![0.0; kdim * pdim];
    let mut out = Array4::zeros((n, cout, oh, ow));
    let out_slice = out.as_slice_mut().unwrap();

    for i in 0..n {
        let x_i = &x_slice[i * cin * h * w..(i + 1) * cin * h * w];
        im2col(x_i, cin, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
        let out_i = &mut out_slice[i * cout * pdim..(i + 1) * cout * pdim];
        gemm_strided(
            cout, kdim, pdim, w_slice, kdim as isize, 1, &cols, pdim as isize, 1, 0.0, out_i,
        );
        if let Some(b) = bias {
            for o in 0..cout {
                let bo = b[o];
                for v in out_i[o * pdim..(o + 1) * pdim].iter_mut() {
                    *v += bo;
                }
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Array4<f64>>,
    pub dw: Option<Array4<f64>>,
    pub db: Option<Array1<f64>>,
}

/// Backward convolution; computes only the requested gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    g_out: &ArrayView4<f64>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let (n, cin, h, w) = x.dim();
    let (cout, _, kh, kw) = weight.dim();
    let (_, _, oh, ow) = g_out.dim();
    let kdim = cin * kh * kw;
    let pdim = oh * ow;

    let x_slice = x.as_slice().expect("conv2d input must be contiguous");
    let w_slice = weight.as_slice().expect("conv2d weight must be contiguous");
    let g_slice = g_out.as_slice().expect("conv2d gradient must be contiguous");

    let mut cols = vec![0.0; kdim * pdim];
    let mut dx = need_dx.then(|| Array4::<f64>::zeros((n, cin, h, w)));
    let mut dw = need_dw.then(|| Array4::<f64>::zeros((cout, cin, kh, kw)));
    let mut db = need_db.then(|| Array1::<f64>::zeros(cout));

    for i in 0..n {
        let g_i = &g_slice[i * cout * pdim..(i + 1) * cout * pdim];

        if need_dw || need_db {
            if let Some(db) = db.as_mut() {
                for o in 0..cout {
                    db[o] += g_i[o * pdim..(o + 1) * pdim].iter().sum::<f64>();
                }
            }
            if let Some(dw) = dw.as_mut() {
                let x_i = &x_slice[i * cin * h * w..(i + 1) * cin * h * w];
                im2col(x_i, cin, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
                // dW(cout,kdim) += g(cout,pdim) . cols^T(pdim,kdim)
                gemm_strided(
                    cout,
                    pdim,
                    kdim,
                    g_i,
                    pdim as isize,
                    1,
                    &cols,
                    1,
                    pdim as isize,
                    1.0,
                    dw.as_slice_mut().unwrap(),
                );
            }
        }

        if let Some(dx) = dx.as_mut() {
            // cols_g(kdim,pdim) = W^T(kdim,cout) . g(cout,pdim)
            gemm_strided(
                kdim,
                cout,
                pdim,
                w_slice,
                1,
                kdim as isize,
                g_i,
                pdim as isize,
                1,
                0.0,
                &mut cols,
            );
            let dx_i = dx.as_slice_mut().unwrap();
            col2im(
                &cols,
                cin,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
                &mut dx_i[i * cin * h * w..(i + 1) * cin * h * w],
            );
        }
    }
    ConvGrads { dx, dw, db }
}

//! Plain `f64` compute kernels shared by the traced (taped) and untraced
//! execution paths. Both paths calling the exact same routines is what makes
//! traced forwards bitwise identical to plain evaluation.

/// C = A @ B with A: [m,k], B: [k,n], C: [m,n]. ikj loop order.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            let row_b = &b[p * n..(p + 1) * n];
            let row_out = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                row_out[j] += a_ip * row_b[j];
            }
        }
    }
}

/// dA = G @ B^T with G: [m,n], B: [k,n], dA: [m,k].
pub fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    debug_assert_eq!(da.len(), m * k);
    for i in 0..m {
        let row_g = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let row_b = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += row_g[j] * row_b[j];
            }
            da[i * k + p] += s;
        }
    }
}

/// dB = A^T @ G with A: [m,k], G: [m,n], dB: [k,n].
pub fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    debug_assert_eq!(db.len(), k * n);
    for i in 0..m {
        let row_g = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let row_db = &mut db[p * n..(p + 1) * n];
            for j in 0..n {
                row_db[j] += a_ip * row_g[j];
            }
        }
    }
}

/// Mirror an out-of-range index back into `[0, n)` (reflect about the edge
/// pixel, no repeat: -1 -> 1, n -> n-2).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n > 0);
    let mut i = i;
    // Two folds suffice while the kernel radius is below the image extent.
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    debug_assert!(
        (0..n).contains(&i),
        "reflect_index out of range: kernel radius exceeds image extent"
    );
    i as usize
}

/// Shape-preserving 2-D cross-correlation with reflect padding.
/// x: [h,w], kernel: [kh,kw] (odd extents), out: [h,w].
pub fn conv2d_reflect(x: &[f64], h: usize, w: usize, kern: &[f64], kh: usize, kw: usize, out: &mut [f64]) {
    debug_assert_eq!(x.len(), h * w);
    debug_assert_eq!(kern.len(), kh * kw);
    debug_assert_eq!(out.len(), h * w);
    let (ch, cw) = (kh as isize / 2, kw as isize / 2);
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for u in 0..kh {
                let src_i = reflect_index(i as isize + u as isize - ch, h);
                for v in 0..kw {
                    let src_j = reflect_index(j as isize + v as isize - cw, w);
                    s += kern[u * kw + v] * x[src_i * w + src_j];
                }
            }
            out[i * w + j] = s;
        }
    }
}

/// Input gradient of `conv2d_reflect`: scatter each output gradient back to
/// the (reflected) source pixels it read.
pub fn conv2d_reflect_grad_input(
    g: &[f64],
    h: usize,
    w: usize,
    kern: &[f64],
    kh: usize,
    kw: usize,
    dx: &mut [f64],
) {
    let (ch, cw) = (kh as isize / 2, kw as isize / 2);
    for i in 0..h {
        for j in 0..w {
            let g_ij = g[i * w + j];
            for u in 0..kh {
                let src_i = reflect_index(i as isize + u as isize - ch, h);
                for v in 0..kw {
                    let src_j = reflect_index(j as isize + v as isize - cw, w);
                    dx[src_i * w + src_j] += g_ij * kern[u * kw + v];
                }
            }
        }
    }
}

/// Kernel gradient of `conv2d_reflect`.
pub fn conv2d_reflect_grad_kernel(
    g: &[f64],
    x: &[f64],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dk: &mut [f64],
) {
    let (ch, cw) = (kh as isize / 2, kw as isize / 2);
    for i in 0..h {
        for j in 0..w {
            let g_ij = g[i * w + j];
            for u in 0..kh {
                let src_i = reflect_index(i as isize + u as isize - ch, h);
                for v in 0..kw {
                    let src_j = reflect_index(j as isize + v as isize - cw, w);
                    dk[u * kw + v] += g_ij * x[src_i * w + src_j];
                }
            }
        }
    }
}

/// Non-overlapping block average: [h,w] -> [h/f, w/f].
pub fn avg_pool(x: &[f64], h: usize, w: usize, f: usize, out: &mut [f64]) {
    let (oh, ow) = (h / f, w / f);
    debug_assert_eq!(out.len(), oh * ow);
    let inv = 1.0 / (f * f) as f64;
    for i in 0..oh {
        for j in 0..ow {
            let mut s = 0.0;
            for u in 0..f {
                for v in 0..f {
                    s += x[(i * f + u) * w + (j * f + v)];
                }
            }
            out[i * ow + j] = s * inv;
        }
    }
}

/// Input gradient of `avg_pool`: spread each output gradient uniformly over
/// its block.
pub fn avg_pool_grad_input(g: &[f64], h: usize, w: usize, f: usize, dx: &mut [f64]) {
    let (oh, ow) = (h / f, w / f);
    let inv = 1.0 / (f * f) as f64;
    for i in 0..oh {
        for j in 0..ow {
            let g_ij = g[i * ow + j] * inv;
            for u in 0..f {
                for v in 0..f {
                    dx[(i * f + u) * w + (j * f + v)] += g_ij;
                }
            }
        }
    }
}

/// y += a * x
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

/// Population variance of a flat buffer (divide by N).
pub fn population_variance(x: &[f64]) -> f64 {
    assert!(!x.is_empty());
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

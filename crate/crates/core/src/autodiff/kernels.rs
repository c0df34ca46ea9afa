//! Dense loops shared by forward and backward rules.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn add_assign(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c[p×r] = a[p×q] · b[q×r]`
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let crow = &mut c[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik != 0.0 {
                axpy(aik, &b[k * r..(k + 1) * r], crow);
            }
        }
    }
}

/// `ga[p×q] += g[p×r] · bᵀ`
pub fn matmul_grad_a(g: &[f64], b: &[f64], ga: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            ga[i * q + k] += dot(grow, &b[k * r..(k + 1) * r]);
        }
    }
}

/// `gb[q×r] += aᵀ · g[p×r]`
pub fn matmul_grad_b(a: &[f64], g: &[f64], gb: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik != 0.0 {
                axpy(aik, grow, &mut gb[k * r..(k + 1) * r]);
            }
        }
    }
}

/// Max-stabilized softmax of one row. Masked-out positions (`valid[i] == false`)
/// are skipped and set to exactly zero. Returns `false` if nothing is valid.
pub fn softmax_row(x: &[f64], valid: Option<&[bool]>, out: &mut [f64]) -> bool {
    let keep = |i: usize| valid.is_none_or(|m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in x.iter().enumerate() {
        if keep(i) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut total = 0.0;
    for (i, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        if keep(i) {
            *o = (v - max).exp();
            total += *o;
        } else {
            *o = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    true
}

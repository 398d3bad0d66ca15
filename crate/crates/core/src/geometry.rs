//! Small fixed-size linear algebra on `f64`.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n == 0.0 {
        a
    } else {
        scale(a, 1.0 / n)
    }
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// Skew-symmetric cross-product matrix `[r]_x`.
pub fn skew(r: Vec3) -> Mat3 {
    [[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]]
}

/// Distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: Vec3, a: Vec3, b: Vec3) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 == 0.0 { 0.0 } else { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) };
    dist(p, add(a, scale(ab, t)))
}

/// Singular value decomposition `m = U diag(s) V^T` by one-sided Jacobi.
///
/// Singular values are returned in descending order; `U` and `V` are
/// orthogonal (not necessarily proper rotations). Columns of `U` belonging to
/// zero singular values are completed to an orthonormal basis.
pub fn svd3(m: &Mat3) -> (Mat3, Vec3, Mat3) {
    // Work on columns of A = m; accumulate right rotations into V.
    let mut a = *m;
    let mut v = IDENTITY;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..2 {
            for q in p + 1..3 {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for row in &a {
                    alpha += row[p] * row[p];
                    beta += row[q] * row[q];
                    gamma += row[p] * row[q];
                }
                if gamma.abs() <= 1e-300 || gamma.abs() <= f64::EPSILON * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
                for row in v.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let col = |mat: &Mat3, j: usize| [mat[0][j], mat[1][j], mat[2][j]];
    let mut order = [0usize, 1, 2];
    let sv = [norm(col(&a, 0)), norm(col(&a, 1)), norm(col(&a, 2))];
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));

    let s = [sv[order[0]], sv[order[1]], sv[order[2]]];
    let mut ucols: [Vec3; 3] = [[0.0; 3]; 3];
    let mut vcols: [Vec3; 3] = [[0.0; 3]; 3];
    let tiny = s[0].max(1e-300) * 1e-13;
    for (k, &j) in order.iter().enumerate() {
        vcols[k] = col(&v, j);
        ucols[k] = if s[k] > tiny { scale(col(&a, j), 1.0 / s[k]) } else { [0.0; 3] };
    }
    // Complete U for rank-deficient inputs.
    if s[1] <= tiny {
        let e = if ucols[0][0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let base = if s[0] > tiny { ucols[0] } else { [0.0, 0.0, 1.0] };
        ucols[0] = base;
        ucols[1] = normalize(cross(base, e));
    }
    if s[2] <= tiny {
        ucols[2] = normalize(cross(ucols[0], ucols[1]));
    }
    let from_cols = |c: &[Vec3; 3]| -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = c[j][i];
            }
        }
        out
    };
    (from_cols(&ucols), s, from_cols(&vcols))
}

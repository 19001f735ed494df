//! Small fixed-size linear algebra: 3-vectors, 3x3 matrices, and the
//! factorizations (QR, polar, symmetric eigendecomposition) used by the
//! frame constructions. Everything is plain `f64` arrays; no allocation.

pub type Vec3 = [f64; 3];
/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// y = M x (column-vector convention).
pub fn mat_vec(m: &Mat3, x: Vec3) -> Vec3 {
    [
        m[0][0] * x[0] + m[0][1] * x[1] + m[0][2] * x[2],
        m[1][0] * x[0] + m[1][1] * x[1] + m[1][2] * x[2],
        m[2][0] * x[0] + m[2][1] * x[1] + m[2][2] * x[2],
    ]
}

/// y = x M, treating x as a row vector.
pub fn row_mat(x: Vec3, m: &Mat3) -> Vec3 {
    [
        x[0] * m[0][0] + x[1] * m[1][0] + x[2] * m[2][0],
        x[0] * m[0][1] + x[1] * m[1][1] + x[2] * m[2][1],
        x[0] * m[0][2] + x[1] * m[1][2] + x[2] * m[2][2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
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
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Inverse via the adjugate. Returns `None` when |det| falls below `tol`.
pub fn inverse(m: &Mat3, tol: f64) -> Option<Mat3> {
    let d = det(m);
    if d.abs() <= tol {
        return None;
    }
    let inv_d = 1.0 / d;
    let mut out = [[0.0; 3]; 3];
    out[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_d;
    out[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_d;
    out[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_d;
    out[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_d;
    out[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_d;
    out[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_d;
    out[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_d;
    out[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_d;
    out[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_d;
    Some(out)
}

pub fn column(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

pub fn set_column(m: &mut Mat3, j: usize, v: Vec3) {
    m[0][j] = v[0];
    m[1][j] = v[1];
    m[2][j] = v[2];
}

pub fn from_columns(c0: Vec3, c1: Vec3, c2: Vec3) -> Mat3 {
    [
        [c0[0], c1[0], c2[0]],
        [c0[1], c1[1], c2[1]],
        [c0[2], c1[2], c2[2]],
    ]
}

pub fn max_abs_diff(a: &Mat3, b: &Mat3) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            worst = worst.max((a[i][j] - b[i][j]).abs());
        }
    }
    worst
}

/// max |(M^T M - I)_{ij}|, the orthogonality defect.
pub fn orthogonality_defect(m: &Mat3) -> f64 {
    let g = mat_mul(&transpose(m), m);
    max_abs_diff(&g, &IDENTITY)
}

/// Householder QR with the diagonal of R forced positive, which makes the
/// factorization of an invertible matrix unique. Returns (Q, R).
pub fn qr(a: &Mat3) -> (Mat3, Mat3) {
    let mut r = *a;
    let mut q = IDENTITY;
    for k in 0..2 {
        let mut x = [0.0; 3];
        for i in k..3 {
            x[i] = r[i][k];
        }
        let alpha = -x[k].signum() * (x[k..].iter().map(|v| v * v).sum::<f64>()).sqrt();
        let mut v = x;
        v[k] -= alpha;
        let vnorm2: f64 = v[k..].iter().map(|c| c * c).sum();
        if vnorm2 <= f64::MIN_POSITIVE {
            continue;
        }
        // r <- (I - 2vv^T/|v|^2) r ; q <- q (I - 2vv^T/|v|^2)
        for j in 0..3 {
            let s: f64 = (k..3).map(|i| v[i] * r[i][j]).sum();
            let f = 2.0 * s / vnorm2;
            for i in k..3 {
                r[i][j] -= f * v[i];
            }
        }
        for i in 0..3 {
            let s: f64 = (k..3).map(|j| q[i][j] * v[j]).sum();
            let f = 2.0 * s / vnorm2;
            for j in k..3 {
                q[i][j] -= f * v[j];
            }
        }
    }
    // Force positive diagonal on R by flipping matched column/row signs.
    for k in 0..3 {
        if r[k][k] < 0.0 {
            for j in 0..3 {
                r[k][j] = -r[k][j];
            }
            for i in 0..3 {
                q[i][k] = -q[i][k];
            }
        }
    }
    (q, r)
}

fn frobenius(m: &Mat3) -> f64 {
    m.iter()
        .flat_map(|row| row.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Orthogonal factor of the polar decomposition A = Q H, computed with the
/// scaled Newton iteration Q <- (g Q + (g Q)^{-T}) / 2. Converges for any
/// invertible input; the scaling keeps ill-conditioned inputs from stalling.
pub fn polar_orthogonal_factor(a: &Mat3, det_tol: f64) -> Option<Mat3> {
    if det(a).abs() <= det_tol {
        return None;
    }
    let mut q = *a;
    for _ in 0..100 {
        let q_inv = inverse(&q, f64::MIN_POSITIVE)?;
        let q_inv_t = transpose(&q_inv);
        let g = (frobenius(&q_inv_t) / frobenius(&q)).sqrt();
        let mut next = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                next[i][j] = 0.5 * (g * q[i][j] + q_inv_t[i][j] / g);
            }
        }
        let delta = max_abs_diff(&next, &q);
        q = next;
        if delta < 1e-15 {
            break;
        }
    }
    Some(q)
}

/// Jacobi eigendecomposition of a symmetric 3x3 matrix. Returns eigenvalues
/// in descending order with matching eigenvector columns.
pub fn sym_eigen(a: &Mat3) -> ([f64; 3], Mat3) {
    let mut m = *a;
    let mut v = IDENTITY;
    for _ in 0..64 {
        // Largest off-diagonal element.
        let (mut p, mut q, mut big) = (0usize, 1usize, m[0][1].abs());
        if m[0][2].abs() > big {
            p = 0;
            q = 2;
            big = m[0][2].abs();
        }
        if m[1][2].abs() > big {
            p = 1;
            q = 2;
            big = m[1][2].abs();
        }
        if big < 1e-300 || big < 1e-16 * (m[0][0].abs() + m[1][1].abs() + m[2][2].abs()).max(1e-300)
        {
            break;
        }
        let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        let mut rot = IDENTITY;
        rot[p][p] = c;
        rot[q][q] = c;
        rot[p][q] = s;
        rot[q][p] = -s;
        m = mat_mul(&mat_mul(&transpose(&rot), &m), &rot);
        m[p][q] = 0.0;
        m[q][p] = 0.0;
        v = mat_mul(&v, &rot);
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).unwrap());
    let vals = [m[order[0]][order[0]], m[order[1]][order[1]], m[order[2]][order[2]]];
    let vecs = from_columns(column(&v, order[0]), column(&v, order[1]), column(&v, order[2]));
    (vals, vecs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng) -> Mat3 {
        let mut m = [[0.0; 3]; 3];
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        m
    }

    #[test]
    fn qr_reconstructs_and_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let m = random_mat(&mut rng);
            if det(&m).abs() < 1e-2 {
                continue;
            }
            let (q, r) = qr(&m);
            assert!(orthogonality_defect(&q) < 1e-13);
            assert!(max_abs_diff(&mat_mul(&q, &r), &m) < 1e-12);
            for k in 0..3 {
                assert!(r[k][k] > 0.0, "R diagonal must be positive");
            }
        }
    }

    #[test]
    fn qr_of_identity_is_identity() {
        let (q, r) = qr(&IDENTITY);
        assert!(max_abs_diff(&q, &IDENTITY) < 1e-15);
        assert!(max_abs_diff(&r, &IDENTITY) < 1e-15);
    }

    #[test]
    fn polar_factor_is_orthogonal_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = random_mat(&mut rng);
            if det(&m).abs() < 1e-2 {
                continue;
            }
            let q = polar_orthogonal_factor(&m, 1e-12).unwrap();
            assert!(orthogonality_defect(&q) < 1e-13);
            // H = Q^T A must come out symmetric positive definite.
            let h = mat_mul(&transpose(&q), &m);
            assert!(max_abs_diff(&h, &transpose(&h)) < 1e-10);
            assert!(det(&h) > 0.0);
        }
    }

    #[test]
    fn sym_eigen_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let m = random_mat(&mut rng);
            let s = mat_mul(&transpose(&m), &m);
            let (vals, vecs) = sym_eigen(&s);
            assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
            assert!(orthogonality_defect(&vecs) < 1e-12);
            let lambda = [
                [vals[0], 0.0, 0.0],
                [0.0, vals[1], 0.0],
                [0.0, 0.0, vals[2]],
            ];
            let recon = mat_mul(&mat_mul(&vecs, &lambda), &transpose(&vecs));
            assert!(max_abs_diff(&recon, &s) < 1e-10 * (1.0 + vals[0].abs()));
        }
    }

    #[test]
    fn inverse_matches_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let m = random_mat(&mut rng);
            if det(&m).abs() < 1e-2 {
                continue;
            }
            let inv = inverse(&m, 1e-12).unwrap();
            assert!(max_abs_diff(&mat_mul(&m, &inv), &IDENTITY) < 1e-10);
        }
    }
}

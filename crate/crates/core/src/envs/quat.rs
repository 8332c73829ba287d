//! Unit quaternions stored as `[w, x, y, z]`.

pub type Quat = [f64; 4];

pub const IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn dot(a: &Quat, b: &Quat) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(q: &Quat) -> f64 {
    dot(q, q).sqrt()
}

/// Returns `None` for a zero or non-finite quaternion.
pub fn normalize(q: &Quat) -> Option<Quat> {
    let n = norm(q);
    (n > 0.0 && n.is_finite()).then(|| q.map(|c| c / n))
}

/// `exp` of the pure quaternion `(0, v)`.
pub fn exp_pure(v: [f64; 3]) -> Quat {
    let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if theta < 1e-12 {
        return normalize(&[1.0, v[0], v[1], v[2]]).expect("near identity");
    }
    let s = theta.sin() / theta;
    [theta.cos(), v[0] * s, v[1] * s, v[2] * s]
}

pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Quat {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let h = angle / 2.0;
    let s = h.sin() / n;
    [h.cos(), axis[0] * s, axis[1] * s, axis[2] * s]
}

/// `arccos |<a, b>|`, with the inner product clamped into `[-1, 1]`.
/// Half the rotation angle between the two orientations.
pub fn half_angle(a: &Quat, b: &Quat) -> f64 {
    dot(a, b).abs().min(1.0).acos()
}

/// Rotation angle between two orientations, `2 arccos |<a, b>|`, in `[0, π]`.
pub fn geodesic(a: &Quat, b: &Quat) -> f64 {
    2.0 * half_angle(a, b)
}

/// The 24 proper rotations of a cube, canonicalised to a non-negative
/// leading component.
pub fn cube_rotations() -> Vec<Quat> {
    let h = 0.5;
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut out = vec![
        IDENTITY,
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                out.push([h, sx * h, sy * h, sz * h]);
            }
        }
    }
    for i in 0..4 {
        for j in (i + 1)..4 {
            for sj in [-1.0, 1.0] {
                let mut q = [0.0; 4];
                q[i] = r;
                q[j] = sj * r;
                out.push(q);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn cube_group_has_24_distinct_closed_elements() {
        let g = cube_rotations();
        assert_eq!(g.len(), 24);
        for a in &g {
            assert!((norm(a) - 1.0).abs() < 1e-12);
            for b in &g {
                let c = mul(a, b);
                assert!(g.iter().any(|d| dot(&c, d).abs() > 1.0 - 1e-12));
            }
        }
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                assert!(dot(a, b).abs() < 1.0 - 1e-6);
            }
        }
    }

    #[test]
    fn exp_of_half_angle_vector_rotates_by_angle() {
        let q = exp_pure([0.0, 0.0, PI / 4.0]);
        let r = from_axis_angle([0.0, 0.0, 1.0], PI / 2.0);
        assert!((dot(&q, &r) - 1.0).abs() < 1e-15);
        assert!((geodesic(&IDENTITY, &q) - PI / 2.0).abs() < 1e-12);
    }
}

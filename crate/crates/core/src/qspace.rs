//! Q-space coordinates, sampling schemes and FSL gradient tables.
//!
//! A q-space point is a unit gradient direction paired with a b-value. Points
//! at b = 0 carry the zero vector as their direction, which matches the FSL
//! convention and lets downstream code detect the b0 branch from the
//! coordinate alone.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the gradient direction norm for diffusion-weighted points.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// A single (direction, b-value) coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QSpacePoint {
    /// Unit gradient direction, or zero when `b == 0`.
    pub g: [f64; 3],
    /// b-value in s/mm².
    pub b: f64,
    /// `b` scaled by the scheme maximum.
    pub b_norm: f64,
}

impl QSpacePoint {
    /// Builds a validated point.
    pub fn new(g: [f64; 3], b: f64, b_norm: f64) -> Result<Self> {
        let p = QSpacePoint { g, b, b_norm };
        p.validate()?;
        Ok(p)
    }

    pub fn is_b0(&self) -> bool {
        self.b == 0.0
    }

    /// Checks the point invariants: unit direction when diffusion weighted,
    /// zero direction at b = 0, and `b_norm` within `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if !self.b.is_finite() || self.b < 0.0 {
            return Err(Error::domain(format!("b-value {} must be finite and >= 0", self.b)));
        }
        if !(0.0..=1.0).contains(&self.b_norm) {
            return Err(Error::domain(format!(
                "normalized b-value {} outside [0, 1]",
                self.b_norm
            )));
        }
        let n = norm(&self.g);
        if self.b > 0.0 {
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::domain(format!("direction norm {n} is not unit")));
            }
        } else if n != 0.0 {
            return Err(Error::domain("b = 0 point must carry a zero direction"));
        }
        Ok(())
    }

    /// The 4-vector `(g_x, g_y, g_z, b_norm)` fed to the q-embedding networks.
    pub fn features(&self) -> [f64; 4] {
        [self.g[0], self.g[1], self.g[2], self.b_norm]
    }
}

/// An ordered collection of q-space points sharing one normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingScheme {
    pub points: Vec<QSpacePoint>,
    pub b_max: f64,
}

impl SamplingScheme {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_b0(&self) -> bool {
        self.points.iter().any(QSpacePoint::is_b0)
    }

    /// Raw `(direction, b)` pairs in scheme order.
    pub fn raw(&self) -> Vec<([f64; 3], f64)> {
        self.points.iter().map(|p| (p.g, p.b)).collect()
    }

    /// Distinct b-values, ascending.
    pub fn shells(&self) -> Vec<f64> {
        let mut bs: Vec<f64> = self.points.iter().map(|p| p.b).collect();
        bs.sort_by(f64::total_cmp);
        bs.dedup();
        bs
    }

    /// Indices of the points whose b-value is `b` or zero.
    pub fn shell_with_b0(&self, b: f64) -> Vec<usize> {
        self.points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.b == 0.0 || p.b == b)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sub-scheme made of the given indices. `b_max` is kept so that the
    /// normalized coordinates stay comparable with the parent scheme.
    pub fn select(&self, indices: &[usize]) -> Result<SamplingScheme> {
        let mut points = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self
                .points
                .get(i)
                .ok_or_else(|| Error::domain(format!("scheme index {i} out of range")))?;
            points.push(*p);
        }
        Ok(SamplingScheme {
            points,
            b_max: self.b_max,
        })
    }

    /// Recomputes `b_norm` against an external reference maximum, e.g. the
    /// maximum b-value a model was trained with.
    pub fn with_reference_b_max(&self, b_ref: f64) -> Result<SamplingScheme> {
        if !(b_ref > 0.0) || !b_ref.is_finite() {
            return Err(Error::domain(format!("reference b_max {b_ref} must be positive")));
        }
        let mut points = self.points.clone();
        for p in &mut points {
            p.b_norm = p.b / b_ref;
            p.validate()?;
        }
        Ok(SamplingScheme {
            points,
            b_max: b_ref,
        })
    }
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Spherical to Cartesian conversion with the polar angle measured from +z.
pub fn sphere_to_cart(theta: f64, phi: f64) -> Result<[f64; 3]> {
    if !(0.0..=PI).contains(&theta) {
        return Err(Error::domain(format!("polar angle {theta} outside [0, pi]")));
    }
    if !(0.0..2.0 * PI).contains(&phi) {
        return Err(Error::domain(format!("azimuth {phi} outside [0, 2pi)")));
    }
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Ok([st * cp, st * sp, ct])
}

/// Deterministic, approximately uniform directions on the full sphere from a
/// Fibonacci lattice.
pub fn fibonacci_directions(n: usize) -> Result<Vec<[f64; 3]>> {
    if n == 0 {
        return Err(Error::domain("direction count must be >= 1"));
    }
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let theta = z.clamp(-1.0, 1.0).acos();
            let phi = (i as f64 * golden).rem_euclid(2.0 * PI);
            sphere_to_cart(theta, phi)
        })
        .collect()
}

/// Builds a scheme from raw `(direction, b)` pairs.
///
/// Directions of diffusion-weighted points are rescaled to unit length, b = 0
/// points get the zero direction, and every `b_norm` is `b / b_max`.
pub fn normalize_scheme(raw: &[([f64; 3], f64)]) -> Result<SamplingScheme> {
    let mut b_max = 0.0f64;
    for (i, &(_, b)) in raw.iter().enumerate() {
        if !b.is_finite() || b < 0.0 {
            return Err(Error::domain(format!("entry {i}: b-value {b} must be finite and >= 0")));
        }
        b_max = b_max.max(b);
    }
    if b_max <= 0.0 {
        return Err(Error::domain("scheme needs at least one b > 0"));
    }
    let mut points = Vec::with_capacity(raw.len());
    for (i, &(g, b)) in raw.iter().enumerate() {
        let g = if b > 0.0 {
            let n = norm(&g);
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::domain(format!(
                    "entry {i}: zero-length direction with b = {b}"
                )));
            }
            // Leave already-unit vectors untouched so normalization is idempotent.
            if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
                g
            } else {
                [g[0] / n, g[1] / n, g[2] / n]
            }
        } else {
            [0.0; 3]
        };
        points.push(QSpacePoint {
            g,
            b,
            b_norm: b / b_max,
        });
    }
    Ok(SamplingScheme { points, b_max })
}

/// One b = 0 point followed by `dirs_per_shell` Fibonacci directions for every
/// positive shell in `shells`. A zero entry in `shells` is ignored since the
/// b0 point is always present.
pub fn multi_shell_scheme(shells: &[f64], dirs_per_shell: usize) -> Result<SamplingScheme> {
    let dirs = fibonacci_directions(dirs_per_shell)?;
    let mut raw = vec![([0.0; 3], 0.0)];
    for &b in shells.iter().filter(|&&b| b > 0.0) {
        raw.extend(dirs.iter().map(|&g| (g, b)));
    }
    normalize_scheme(&raw)
}

fn parse_row(line: &str, what: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::Parse(format!("{what}: non-numeric token {tok:?}")))
        })
        .collect()
}

/// Parses FSL `bvals` / `bvecs` text into a normalized scheme.
pub fn load_fsl_tables(bvals_text: &str, bvecs_text: &str) -> Result<SamplingScheme> {
    let bval_lines: Vec<&str> = bvals_text.lines().filter(|l| !l.trim().is_empty()).collect();
    if bval_lines.len() != 1 {
        return Err(Error::Parse(format!(
            "bvals: expected one line, found {}",
            bval_lines.len()
        )));
    }
    let bvals = parse_row(bval_lines[0], "bvals")?;

    let vec_lines: Vec<&str> = bvecs_text.lines().filter(|l| !l.trim().is_empty()).collect();
    if vec_lines.len() != 3 {
        return Err(Error::Parse(format!(
            "bvecs: expected three lines, found {}",
            vec_lines.len()
        )));
    }
    let rows = vec_lines
        .iter()
        .enumerate()
        .map(|(i, l)| parse_row(l, &format!("bvecs row {i}")))
        .collect::<Result<Vec<_>>>()?;
    for (i, r) in rows.iter().enumerate() {
        if r.len() != bvals.len() {
            return Err(Error::Parse(format!(
                "bvecs row {i} has {} columns but bvals has {} entries",
                r.len(),
                bvals.len()
            )));
        }
    }
    let raw: Vec<([f64; 3], f64)> = bvals
        .iter()
        .enumerate()
        .map(|(i, &b)| ([rows[0][i], rows[1][i], rows[2][i]], b))
        .collect();
    normalize_scheme(&raw).map_err(|e| match e {
        Error::Domain(m) => Error::Parse(m),
        other => other,
    })
}

fn join_row(values: impl Iterator<Item = f64>) -> String {
    let mut s = values.map(|v| format!("{v}")).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

/// Renders a scheme as FSL `(bvals, bvecs)` text. Values use the shortest
/// decimal form that parses back to the same binary value.
pub fn save_fsl_tables(scheme: &SamplingScheme) -> (String, String) {
    let bvals = join_row(scheme.points.iter().map(|p| p.b));
    let mut bvecs = String::new();
    for axis in 0..3 {
        bvecs.push_str(&join_row(scheme.points.iter().map(|p| p.g[axis] + 0.0)));
    }
    (bvals, bvecs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sphere_to_cart_cardinal_points() {
        let p = sphere_to_cart(0.0, 0.0).unwrap();
        assert_eq!(p, [0.0, 0.0, 1.0]);
        let e = sphere_to_cart(PI / 2.0, 0.0).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15 && e[2].abs() < 1e-15);
    }

    #[test]
    fn sphere_to_cart_matches_scalar_trig() {
        // sin(pi/3) cos(pi/4), sin(pi/3) sin(pi/4), cos(pi/3)
        let expected = [0.6123724356957946, 0.6123724356957946, 0.5];
        let v = sphere_to_cart(PI / 3.0, PI / 4.0).unwrap();
        for k in 0..3 {
            assert!((v[k] - expected[k]).abs() < 1e-15, "{v:?}");
        }
    }

    #[test]
    fn sphere_to_cart_rejects_out_of_range() {
        assert!(sphere_to_cart(-0.1, 0.0).is_err());
        assert!(sphere_to_cart(PI + 0.01, 0.0).is_err());
        assert!(sphere_to_cart(1.0, 2.0 * PI).is_err());
    }

    #[test]
    fn fibonacci_properties() {
        assert_eq!(fibonacci_directions(1).unwrap().len(), 1);
        assert!(fibonacci_directions(0).is_err());

        let d30 = fibonacci_directions(30).unwrap();
        let mut min_angle = f64::INFINITY;
        for i in 0..d30.len() {
            for j in i + 1..d30.len() {
                let dot: f64 = (0..3).map(|k| d30[i][k] * d30[j][k]).sum();
                min_angle = min_angle.min(dot.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        assert!(min_angle >= 15.0, "min separation {min_angle}");

        let d60 = fibonacci_directions(60).unwrap();
        let mut mean = [0.0; 3];
        for d in &d60 {
            for k in 0..3 {
                mean[k] += d[k] / 60.0;
            }
        }
        assert!(norm(&mean) <= 0.2);
        assert_eq!(d60, fibonacci_directions(60).unwrap());
    }

    #[test]
    fn normalize_examples() {
        let s = normalize_scheme(&[([0.0, 0.0, 2.0], 1000.0), ([0.0; 3], 0.0)]).unwrap();
        assert_eq!(s.b_max, 1000.0);
        assert_eq!(s.points[0].g, [0.0, 0.0, 1.0]);
        assert_eq!(s.points[0].b_norm, 1.0);
        assert_eq!(s.points[1].b_norm, 0.0);

        let s = multi_shell_scheme(&[0.0, 1000.0, 2000.0], 5).unwrap();
        let mut norms: Vec<f64> = s.points.iter().map(|p| p.b_norm).collect();
        norms.dedup();
        assert_eq!(norms, vec![0.0, 0.5, 1.0]);

        let s = multi_shell_scheme(&[3000.0], 4).unwrap();
        assert!(s.points.iter().all(|p| p.b_norm == 0.0 || p.b_norm == 1.0));
    }

    #[test]
    fn normalize_errors() {
        assert!(normalize_scheme(&[([1.0, 0.0, 0.0], 0.0)]).is_err());
        assert!(normalize_scheme(&[([0.0; 3], 1000.0)]).is_err());
        assert!(normalize_scheme(&[([1.0, 0.0, 0.0], -5.0)]).is_err());
    }

    #[test]
    fn fsl_minimal_table() {
        let s = load_fsl_tables("0 1000\n", "0 1\n0 0\n0 0\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.points[1].g, [1.0, 0.0, 0.0]);
        assert!(s.points[0].is_b0());
    }

    #[test]
    fn fsl_errors() {
        let err = load_fsl_tables("0 1000 2000\n", "0 1\n0 0\n0 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        let err = load_fsl_tables("0 abc\n", "0 1\n0 0\n0 0\n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
        assert!(load_fsl_tables("0 1000\n", "0 1\n0 0\n").is_err());
    }

    #[test]
    fn fsl_round_trip_90_points() {
        let s = multi_shell_scheme(&[1000.0, 2000.0, 3000.0], 30).unwrap();
        assert_eq!(s.len(), 91);
        let (bvals, bvecs) = save_fsl_tables(&s);
        assert!(bvals.ends_with('\n') && !bvals.contains("  "));
        let back = load_fsl_tables(&bvals, &bvecs).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn reference_b_max() {
        let s = multi_shell_scheme(&[1000.0], 6).unwrap();
        let r = s.with_reference_b_max(2000.0).unwrap();
        assert!(r.points.iter().all(|p| p.b_norm == 0.0 || p.b_norm == 0.5));
        assert!(s.with_reference_b_max(500.0).is_err());
    }

    fn raw_strategy() -> impl Strategy<Value = Vec<([f64; 3], f64)>> {
        prop::collection::vec(
            (
                prop::array::uniform3(-2.0f64..2.0),
                prop_oneof![Just(0.0), 1.0f64..4000.0],
            ),
            1..40,
        )
        .prop_map(|mut v| {
            v.push(([0.3, -0.4, 1.2], 1500.0));
            v
        })
        .prop_filter("non-degenerate directions", |v| {
            v.iter().all(|(g, b)| *b == 0.0 || norm(g) > 1e-3)
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(raw in raw_strategy()) {
            let once = normalize_scheme(&raw).unwrap();
            let twice = normalize_scheme(&once.raw()).unwrap();
            prop_assert_eq!(&once, &twice);
            for p in &once.points {
                prop_assert!(p.validate().is_ok());
                if p.b > 0.0 {
                    prop_assert!((norm(&p.g) - 1.0).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn fsl_round_trip_preserves_values(raw in raw_strategy()) {
            let s = normalize_scheme(&raw).unwrap();
            let (bvals, bvecs) = save_fsl_tables(&s);
            let back = load_fsl_tables(&bvals, &bvecs).unwrap();
            for (a, b) in s.points.iter().zip(&back.points) {
                prop_assert!((a.b - b.b).abs() <= 1e-6 * a.b.abs().max(1.0));
                for k in 0..3 {
                    prop_assert!((a.g[k] - b.g[k]).abs() <= 1e-6);
                }
            }
        }
    }
}

//! Spherical chart, tangent-frame operators and geometry-compatible fluxes.
//!
//! Points on the unit sphere are parameterized by a longitude coordinate
//! `lambda` and a latitude coordinate `phi`, both in `[-1, 1]`, with the
//! embedding using the scaled angles `π·lambda` and `(π/2)·phi`. The same
//! scaled angles are used uniformly in the gradient, the divergence and the
//! area weight so that the operators are adjoint under the surface measure.

use thiserror::Error;

use std::f64::consts::PI;

/// Latitude cosine below which the chart is considered degenerate.
pub const POLE_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("chart is singular near the pole: cos(pi*phi/2) = {0:.3e}")]
    PoleProximity(f64),
}

/// A point on the space-time domain of the sphere chart.
///
/// `lambda` and `phi` are the scaled longitude/latitude in `[-1, 1]`,
/// `t` is time in `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChartPoint {
    pub lambda: f64,
    pub phi: f64,
    pub t: f64,
}

impl ChartPoint {
    pub fn new(lambda: f64, phi: f64, t: f64) -> Self {
        ChartPoint { lambda, phi, t }
    }

    /// cos of the scaled latitude angle, the recurring metric factor.
    pub fn cos_phi(&self) -> f64 {
        (PI / 2.0 * self.phi).cos()
    }
}

/// Ambient-space flux components `Φ(u) = f1(u) i1 + f2(u) i2 + f3(u) i3`.
///
/// With `f1 = f2 = 0` the induced tangent field is geometry-compatible:
/// its divergence vanishes for every frozen state.
pub struct FluxSpec {
    pub f1: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub f2: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub f3: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Derivative of `f3` with respect to the state.
    pub df3: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub descriptor: String,
}

impl FluxSpec {
    /// The flux used in all four benchmarks: `f3(u) = (π/2) u²`, which
    /// reduces the conservation law to 1D Burgers along the longitude.
    pub fn burgers_sphere() -> Self {
        FluxSpec {
            f1: Box::new(|_| 0.0),
            f2: Box::new(|_| 0.0),
            f3: Box::new(|u| PI / 2.0 * u * u),
            df3: Box::new(|u| PI * u),
            descriptor: "f3(u) = (pi/2) u^2".into(),
        }
    }

    /// True when `f1 = f2 = 0`, i.e. the flux reduces to longitudinal
    /// transport and the entropy flux has no `phi` component.
    pub fn is_zonal(&self) -> bool {
        (self.f1)(0.37) == 0.0
            && (self.f1)(-1.3) == 0.0
            && (self.f2)(0.37) == 0.0
            && (self.f2)(-1.3) == 0.0
    }
}

/// Rectangular chart region with optional periodic longitude.
#[derive(Clone, Debug)]
pub struct Domain {
    pub lambda_range: (f64, f64),
    pub phi_range: (f64, f64),
    pub periodic_lambda: bool,
    pub t_final: f64,
}

impl Domain {
    pub fn new(
        lambda_range: (f64, f64),
        phi_range: (f64, f64),
        periodic_lambda: bool,
        t_final: f64,
    ) -> Self {
        assert!(phi_range.0 >= -1.0 && phi_range.1 <= 1.0, "phi out of chart");
        assert!(lambda_range.0 < lambda_range.1 && phi_range.0 < phi_range.1);
        if periodic_lambda {
            assert_eq!(
                lambda_range,
                (-1.0, 1.0),
                "periodic longitude requires the full range"
            );
        }
        Domain {
            lambda_range,
            phi_range,
            periodic_lambda,
            t_final,
        }
    }

    /// The band used by the benchmark experiments.
    pub fn band(periodic_lambda: bool, t_final: f64) -> Self {
        Domain::new((-1.0, 1.0), (-0.5, 0.5), periodic_lambda, t_final)
    }

    pub fn contains(&self, p: &ChartPoint) -> bool {
        p.lambda >= self.lambda_range.0
            && p.lambda <= self.lambda_range.1
            && p.phi >= self.phi_range.0
            && p.phi <= self.phi_range.1
            && p.t >= 0.0
            && p.t <= self.t_final
    }

    /// Surface area of the chart region (time excluded).
    pub fn area(&self) -> f64 {
        let (l0, l1) = self.lambda_range;
        let (p0, p1) = self.phi_range;
        // ∫ (π²/2) cos(πφ/2) dλ dφ = (π²/2)(l1-l0)(2/π)(sin(πp1/2) - sin(πp0/2))
        PI * (l1 - l0) * ((PI / 2.0 * p1).sin() - (PI / 2.0 * p0).sin())
    }

    /// Total 1D length of the spatial boundary edges.
    ///
    /// Longitude edges (when not periodic) have length element π/2 per unit
    /// dφ; latitude edges have length element π cos(πφ/2) per unit dλ.
    pub fn boundary_length(&self) -> f64 {
        let (l0, l1) = self.lambda_range;
        let (p0, p1) = self.phi_range;
        let phi_edges = PI * ((PI / 2.0 * p0).cos() + (PI / 2.0 * p1).cos()) * (l1 - l0);
        if self.periodic_lambda {
            phi_edges
        } else {
            phi_edges + 2.0 * (PI / 2.0) * (p1 - p0)
        }
    }
}

/// Embed a chart point into R³; the result has unit norm.
pub fn embed(p: &ChartPoint) -> [f64; 3] {
    let a = PI * p.lambda;
    let b = PI / 2.0 * p.phi;
    [b.cos() * a.cos(), b.cos() * a.sin(), b.sin()]
}

/// Tangent-frame gradient components `(g_λ, g_φ)` of a scalar with the
/// given chart partial derivatives.
pub fn grad_g(dxi_dlambda: f64, dxi_dphi: f64, p: &ChartPoint) -> Result<(f64, f64), GeometryError> {
    let c = p.cos_phi();
    if c < POLE_EPS {
        return Err(GeometryError::PoleProximity(c));
    }
    Ok((dxi_dlambda / (PI * c), 2.0 / PI * dxi_dphi))
}

/// A tangent vector field with closed-form chart partials, as needed by the
/// divergence operator.
pub struct TangentField<'a> {
    /// `f_λ(λ, φ)`
    pub f_lambda: &'a dyn Fn(f64, f64) -> f64,
    /// `∂f_λ/∂λ`
    pub df_lambda_dlambda: &'a dyn Fn(f64, f64) -> f64,
    /// `f_φ(λ, φ)`
    pub f_phi: &'a dyn Fn(f64, f64) -> f64,
    /// `∂f_φ/∂φ`
    pub df_phi_dphi: &'a dyn Fn(f64, f64) -> f64,
}

/// Surface divergence of a tangent field at a chart point:
/// `(1/cos(πφ/2)) [ (2/π) ∂_φ(f_φ cos(πφ/2)) + (1/π) ∂_λ f_λ ]`.
pub fn div_g(field: &TangentField<'_>, p: &ChartPoint) -> Result<f64, GeometryError> {
    let c = p.cos_phi();
    if c < POLE_EPS {
        return Err(GeometryError::PoleProximity(c));
    }
    let (l, f) = (p.lambda, p.phi);
    let dcos = -(PI / 2.0) * (PI / 2.0 * f).sin();
    // ∂_φ (f_φ cos(πφ/2)) by the product rule.
    let dphi_term = (field.df_phi_dphi)(l, f) * c + (field.f_phi)(l, f) * dcos;
    let dlam_term = (field.df_lambda_dlambda)(l, f);
    Ok((2.0 / PI * dphi_term + 1.0 / PI * dlam_term) / c)
}

/// Tangent components `(f_λ, f_φ)` of the geometry-compatible flux induced
/// by an ambient `Φ(u)`:
///
/// `f_λ = f1 sin(πφ/2)cos(πλ) + f2 sin(πφ/2)sin(πλ) + f3 cos(πφ/2)`,
/// `f_φ = -f1 sin(πλ) + f2 cos(πλ)`.
pub fn flux_components(u: f64, p: &ChartPoint, spec: &FluxSpec) -> (f64, f64) {
    let a = PI * p.lambda;
    let b = PI / 2.0 * p.phi;
    let (f1, f2, f3) = ((spec.f1)(u), (spec.f2)(u), (spec.f3)(u));
    let f_lambda = f1 * b.sin() * a.cos() + f2 * b.sin() * a.sin() + f3 * b.cos();
    let f_phi = -f1 * a.sin() + f2 * a.cos();
    (f_lambda, f_phi)
}

/// Surface density per unit `dλ dφ`: `(π²/2) cos(πφ/2)`.
pub fn area_weight(p: &ChartPoint) -> f64 {
    PI * PI / 2.0 * p.cos_phi()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn embed_reference_points() {
        let e = embed(&ChartPoint::new(0.0, 0.0, 0.0));
        assert!(close(e[0], 1.0, 1e-15) && close(e[1], 0.0, 1e-15) && close(e[2], 0.0, 1e-15));
        // North pole for any longitude.
        for lam in [-0.9, 0.0, 0.3, 1.0] {
            let e = embed(&ChartPoint::new(lam, 1.0, 0.0));
            assert!(close(e[2], 1.0, 1e-15));
            assert!(e[0].abs() < 1e-15 && e[1].abs() < 1e-15);
        }
        let e = embed(&ChartPoint::new(0.5, 0.0, 0.0));
        assert!(close(e[0], 0.0, 1e-15) && close(e[1], 1.0, 1e-15) && close(e[2], 0.0, 1e-15));
    }

    #[test]
    fn embed_unit_norm_random_points() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let p = ChartPoint::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0);
            let e = embed(&p);
            let n = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
            assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn grad_of_constant_and_coordinates() {
        let p = ChartPoint::new(0.2, 0.0, 0.0);
        assert_eq!(grad_g(0.0, 0.0, &p).unwrap(), (0.0, 0.0));
        // ξ = λ at φ = 0.
        let (gl, gp) = grad_g(1.0, 0.0, &p).unwrap();
        assert!(close(gl, 1.0 / PI, 1e-15) && gp == 0.0);
        // ξ = φ at any φ.
        for phi in [-0.7, 0.0, 0.4] {
            let p = ChartPoint::new(0.0, phi, 0.0);
            let (gl, gp) = grad_g(0.0, 1.0, &p).unwrap();
            assert!(gl == 0.0 && close(gp, 2.0 / PI, 1e-15));
        }
    }

    #[test]
    fn grad_pole_singularity() {
        let p = ChartPoint::new(0.0, 1.0, 0.0);
        assert!(matches!(
            grad_g(1.0, 0.0, &p),
            Err(GeometryError::PoleProximity(_))
        ));
    }

    #[test]
    fn div_of_geometry_compatible_flux_is_zero() {
        // f1 = f2 = 0, f3 constant: f_λ = f3 cos(πφ/2), f_φ = 0.
        let f3 = 0.8;
        let field = TangentField {
            f_lambda: &move |_, phi: f64| f3 * (PI / 2.0 * phi).cos(),
            df_lambda_dlambda: &|_, _| 0.0,
            f_phi: &|_, _| 0.0,
            df_phi_dphi: &|_, _| 0.0,
        };
        for (l, f) in [(0.0, 0.0), (0.3, -0.4), (-0.9, 0.7)] {
            let d = div_g(&field, &ChartPoint::new(l, f, 0.0)).unwrap();
            assert!(d.abs() < 1e-14, "div = {d}");
        }
    }

    #[test]
    fn div_cosine_profile_is_zero() {
        // f_λ = cos(πφ/2), f_φ = 0: no λ dependence, so divergence vanishes.
        let field = TangentField {
            f_lambda: &|_, phi: f64| (PI / 2.0 * phi).cos(),
            df_lambda_dlambda: &|_, _| 0.0,
            f_phi: &|_, _| 0.0,
            df_phi_dphi: &|_, _| 0.0,
        };
        let d = div_g(&field, &ChartPoint::new(0.1, 0.35, 0.0)).unwrap();
        assert!(d.abs() < 1e-15);
    }

    #[test]
    fn div_unit_phi_field_is_minus_tangent() {
        let field = TangentField {
            f_lambda: &|_, _| 0.0,
            df_lambda_dlambda: &|_, _| 0.0,
            f_phi: &|_, _| 1.0,
            df_phi_dphi: &|_, _| 0.0,
        };
        for phi in [-0.6, -0.2, 0.0, 0.5] {
            let d = div_g(&field, &ChartPoint::new(0.0, phi, 0.0)).unwrap();
            let expect = -(PI / 2.0 * phi).tan();
            assert!(close(d, expect, 1e-13), "phi={phi}: {d} vs {expect}");
        }
    }

    #[test]
    fn flux_components_burgers() {
        let spec = FluxSpec::burgers_sphere();
        let p = ChartPoint::new(0.3, 0.0, 0.0);
        let (fl, fp) = flux_components(1.0, &p, &spec);
        assert!(close(fl, PI / 2.0, 1e-15) && fp == 0.0);
        let (fl, fp) = flux_components(0.0, &p, &spec);
        assert!(fl == 0.0 && fp == 0.0);
    }

    #[test]
    fn flux_components_ambient_x_direction() {
        let spec = FluxSpec {
            f1: Box::new(|_| 1.0),
            f2: Box::new(|_| 0.0),
            f3: Box::new(|_| 0.0),
            df3: Box::new(|_| 0.0),
            descriptor: "f1 = 1".into(),
        };
        let (fl, fp) = flux_components(0.5, &ChartPoint::new(0.0, 0.0, 0.0), &spec);
        assert!(fl == 0.0 && fp == 0.0); // sin(0) factors kill both terms
    }

    #[test]
    fn area_weight_values_and_total() {
        assert!(close(
            area_weight(&ChartPoint::new(0.0, 0.0, 0.0)),
            PI * PI / 2.0,
            1e-15
        ));
        assert!(area_weight(&ChartPoint::new(0.0, 1.0, 0.0)).abs() < 1e-15);
        assert!(area_weight(&ChartPoint::new(0.0, -1.0, 0.0)).abs() < 1e-15);

        // Trapezoid quadrature of the weight over the full chart → 4π,
        // and over the φ band [-0.5, 0.5] → 2π√2.
        let quad = |p0: f64, p1: f64| {
            let n = 20_000;
            let h = (p1 - p0) / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let phi = p0 + i as f64 * h;
                let w = area_weight(&ChartPoint::new(0.0, phi, 0.0));
                acc += if i == 0 || i == n { 0.5 * w } else { w };
            }
            acc * h * 2.0 // λ extent is 2
        };
        let full = quad(-1.0, 1.0);
        assert!((full - 4.0 * PI).abs() / (4.0 * PI) <= 1e-6, "full = {full}");
        let band = quad(-0.5, 0.5);
        let expect = 2.0 * PI * std::f64::consts::SQRT_2;
        assert!((band - expect).abs() / expect <= 1e-6, "band = {band}");
    }

    #[test]
    fn domain_area_closed_form() {
        let full = Domain::new((-1.0, 1.0), (-1.0, 1.0), false, 1.0);
        assert!(close(full.area(), 4.0 * PI, 1e-12));
        let band = Domain::band(false, 1.0);
        assert!(close(band.area(), 2.0 * PI * std::f64::consts::SQRT_2, 1e-12));
    }

    #[test]
    fn divergence_theorem_monte_carlo() {
        // MC estimate of ∫ div_g f dV over the sphere for the geometry-
        // compatible flux at a constant state: zero within 3 standard errors.
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let field = TangentField {
            f_lambda: &|_, phi: f64| 0.9 * (PI / 2.0 * phi).cos(),
            df_lambda_dlambda: &|_, _| 0.0,
            f_phi: &|_, _| 0.0,
            df_phi_dphi: &|_, _| 0.0,
        };
        let n = 20_000;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            // Area-uniform sampling via inverse CDF in sin(πφ/2).
            let s: f64 = rng.gen_range(-1.0f64..1.0);
            let phi = 2.0 / PI * s.asin();
            let lam = rng.gen_range(-1.0..1.0);
            let p = ChartPoint::new(lam, phi, 0.0);
            if p.cos_phi() < 1e-6 {
                vals.push(0.0);
                continue;
            }
            vals.push(div_g(&field, &p).unwrap() * 4.0 * PI);
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se.max(1e-12), "mean {mean}, se {se}");
    }
}

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `nfe + 1` sway-warped times on `[0, 1]`:
/// `t = u + s (cos(pi u / 2) - 1 + u)` for `u = i / nfe`.
pub fn sway_times(nfe: usize, s: f64) -> Result<Vec<f64>> {
    if nfe == 0 {
        return Err(Error::invalid("nfe must be at least 1"));
    }
    if !(-1.0..=0.0).contains(&s) {
        return Err(Error::invalid(format!("sway coefficient {s} outside [-1, 0]")));
    }
    Ok((0..=nfe)
        .map(|i| {
            if i == 0 {
                0.0
            } else if i == nfe {
                1.0
            } else {
                let u = i as f64 / nfe as f64;
                u + s * ((std::f64::consts::FRAC_PI_2 * u).cos() - 1.0 + u)
            }
        })
        .collect())
}

/// `v_c + gamma (v_c - v_u)`.
pub fn cfg_combine(v_cond: &Array2<f64>, v_uncond: &Array2<f64>, gamma: f64) -> Array2<f64> {
    if gamma == 0.0 {
        return v_cond.clone();
    }
    v_cond + &((v_cond - v_uncond) * gamma)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    #[default]
    Euler,
    Midpoint,
}

impl std::str::FromStr for OdeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(OdeMethod::Euler),
            "midpoint" => Ok(OdeMethod::Midpoint),
            other => Err(Error::invalid(format!("unknown ODE method `{other}`"))),
        }
    }
}

/// Integrate `dx/dt = v(x, t)` over `times` and return the final state.
pub fn ode_solve<V>(mut velocity: V, x0: &Array2<f64>, times: &[f64], method: OdeMethod) -> Result<Array2<f64>>
where
    V: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    let mut x = x0.clone();
    for (i, w) in times.windows(2).enumerate() {
        let (t, dt) = (w[0], w[1] - w[0]);
        let v = velocity(&x, t)?;
        match method {
            OdeMethod::Euler => x.scaled_add(dt, &v),
            OdeMethod::Midpoint => {
                let mut mid = x.clone();
                mid.scaled_add(0.5 * dt, &v);
                let vm = velocity(&mid, t + 0.5 * dt)?;
                x.scaled_add(dt, &vm);
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::OdeDiverged { step: i });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_when_sway_is_zero() {
        let t = sway_times(8, 0.0).unwrap();
        for (i, v) in t.iter().enumerate() {
            assert_eq!(*v, i as f64 / 8.0);
        }
    }

    #[test]
    fn sway_probe_and_endpoints() {
        let t = sway_times(2, -1.0).unwrap();
        assert_eq!(t[0], 0.0);
        assert_eq!(t[2], 1.0);
        let expected = 0.5 - ((std::f64::consts::PI / 4.0).cos() - 0.5);
        assert!((t[1] - expected).abs() < 1e-15);
        assert!((t[1] - 0.29289).abs() < 1e-5);
    }

    #[test]
    fn schedules_are_strictly_increasing() {
        for nfe in [1, 2, 3, 4, 8, 16, 32, 100] {
            for s in [0.0, -0.25, -0.5, -0.75, -1.0] {
                let t = sway_times(nfe, s).unwrap();
                assert_eq!(t.len(), nfe + 1);
                assert!(t.windows(2).all(|w| w[1] > w[0]), "nfe {nfe}, s {s}");
                // telescoping sum of steps
                let total: f64 = t.windows(2).map(|w| w[1] - w[0]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(sway_times(0, 0.0).is_err());
        assert!(sway_times(4, 0.5).is_err());
    }

    #[test]
    fn cfg_neutral_cases_and_probe() {
        let vc = Array2::from_elem((2, 2), 2.0);
        let vu = Array2::from_elem((2, 2), 1.0);
        assert_eq!(cfg_combine(&vc, &vu, 0.0), vc);
        assert_eq!(cfg_combine(&vc, &vc, 3.0), vc);
        assert_eq!(cfg_combine(&vc, &vu, 0.5), Array2::from_elem((2, 2), 2.5));
    }

    #[test]
    fn constant_field_is_exact() {
        let x0 = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64) - 0.5 * j as f64);
        let c = Array2::from_shape_fn((3, 4), |(i, j)| 0.25 * (i + j) as f64);
        for method in [OdeMethod::Euler, OdeMethod::Midpoint] {
            for nfe in [1, 3, 8, 32] {
                let times = sway_times(nfe, -1.0).unwrap();
                let x = ode_solve(|_, _| Ok(c.clone()), &x0, &times, method).unwrap();
                let diff = (&x - &(&x0 + &c)).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
                assert!(diff < 1e-12, "{method:?} nfe {nfe}: {diff}");
            }
        }
    }

    #[test]
    fn linear_field_approaches_e() {
        let x0 = Array2::from_elem((1, 3), 1.5);
        let times = sway_times(1000, 0.0).unwrap();
        let x = ode_solve(|x, _| Ok(x.clone()), &x0, &times, OdeMethod::Euler).unwrap();
        let rel = (x[[0, 0]] / (1.5 * std::f64::consts::E) - 1.0).abs();
        assert!(rel < 2e-3, "{rel}");
        let m = ode_solve(|x, _| Ok(x.clone()), &x0, &sway_times(50, 0.0).unwrap(), OdeMethod::Midpoint).unwrap();
        assert!((m[[0, 0]] / (1.5 * std::f64::consts::E) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn single_step_euler() {
        let x0 = Array2::from_elem((2, 2), 3.0);
        let x = ode_solve(|x, t| Ok(x * 2.0 + t), &x0, &sway_times(1, -1.0).unwrap(), OdeMethod::Euler).unwrap();
        assert_eq!(x, Array2::from_elem((2, 2), 9.0));
    }

    #[test]
    fn divergence_is_reported() {
        let x0 = Array2::from_elem((1, 1), 1.0);
        let err = ode_solve(|_, _| Ok(Array2::from_elem((1, 1), f64::INFINITY)), &x0, &[0.0, 0.5, 1.0], OdeMethod::Euler).unwrap_err();
        assert!(err.to_string().contains("ODE diverged"));
    }
}

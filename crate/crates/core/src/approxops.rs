//! Approximation operators on sampled functions: mollification against a
//! compactly supported bump, boundary interpolants (linear, averaging,
//! zeroing, and the gamma-matched hats), and their compositions, which
//! approximate the identity while preserving order cones and realizing the
//! prescribed boundary derivative relations.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum ApproxError {
    #[error("1/n = {inv_n} is below the grid resolution {step} (need >= 2 cells)")]
    ResolutionTooCoarse { inv_n: f64, step: f64 },
    #[error("window of {len} samples is too small for a kernel of half-width {half}")]
    WindowTooSmall { len: usize, half: usize },
}

/// Function sampled on a fine uniform grid `x0 + i * step`.
#[derive(Debug, Clone)]
pub struct SampledFunction {
    pub x0: f64,
    pub step: f64,
    pub values: Vec<f64>,
}

impl SampledFunction {
    pub fn from_fn(lo: f64, hi: f64, step_hint: f64, f: impl Fn(f64) -> f64) -> SampledFunction {
        let cells = ((hi - lo) / step_hint).ceil().max(4.0) as usize;
        let step = (hi - lo) / cells as f64;
        let values = (0..=cells).map(|i| f(lo + step * i as f64)).collect();
        SampledFunction {
            x0: lo,
            step,
            values,
        }
    }

    /// Sampled on `[lo, hi]` with the operator-adapted resolution
    /// `step <= 1/(20 n)`. The default is much finer, `1/(256 n)`: the bump
    /// kernel is flat to all orders at its support edge, so at this
    /// resolution the first stencil points next to a boundary see a
    /// polynomially exact interpolation zone and the one-sided derivative
    /// stencils land within 1e-6 relative.
    pub fn for_operator(lo: f64, hi: f64, n: u32, f: impl Fn(f64) -> f64) -> SampledFunction {
        SampledFunction::from_fn(lo, hi, 1.0 / (256.0 * n as f64), f)
    }

    /// The coarser spec-level resolution `1/(20 n)`, appropriate for order
    /// comparisons via central differences: second differences of O(1)
    /// functions on the ultra-fine grid would drown a 1e-9 margin in
    /// cancellation noise.
    pub fn for_order_checks(lo: f64, hi: f64, n: u32, f: impl Fn(f64) -> f64) -> SampledFunction {
        SampledFunction::from_fn(lo, hi, 1.0 / (20.0 * n as f64), f)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x0 + self.step * i as f64
    }

    pub fn x_end(&self) -> f64 {
        self.x(self.len() - 1)
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Max-norm distance on the common window.
    pub fn distance(&self, other: &SampledFunction) -> f64 {
        let lo = self.x0.max(other.x0);
        let hi = self.x_end().min(other.x_end());
        let mut worst: f64 = 0.0;
        let mut x = lo;
        while x <= hi + 1e-12 {
            worst = worst.max((self.at(x) - other.at(x)).abs());
            x += self.step;
        }
        worst
    }

    /// Linear interpolation (clamped at the window edges).
    pub fn at(&self, x: f64) -> f64 {
        let u = (x - self.x0) / self.step;
        if u <= 0.0 {
            return self.values[0];
        }
        let i = u.floor() as usize;
        if i + 1 >= self.len() {
            return self.values[self.len() - 1];
        }
        let frac = u - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }

    /// Trapezoid integral of the samples over `[a, b]` within the window.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let n_sub = 4 * ((b - a) / self.step).ceil().max(1.0) as usize;
        let h = (b - a) / n_sub as f64;
        let mut acc = 0.5 * (self.at(a) + self.at(b));
        for k in 1..n_sub {
            acc += self.at(a + h * k as f64);
        }
        acc * h
    }

    /// One-sided first derivative at the left edge (5-point, order 4).
    pub fn deriv1_left(&self) -> f64 {
        let f = &self.values;
        (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]) / (12.0 * self.step)
    }

    /// One-sided second derivative at the left edge (6-point, order 4).
    pub fn deriv2_left(&self) -> f64 {
        let f = &self.values;
        (15.0 / 4.0 * f[0] - 77.0 / 6.0 * f[1] + 107.0 / 6.0 * f[2] - 13.0 * f[3]
            + 61.0 / 12.0 * f[4]
            - 5.0 / 6.0 * f[5])
            / (self.step * self.step)
    }

    pub fn deriv1_right(&self) -> f64 {
        let k = self.len() - 1;
        let f = &self.values;
        -(-25.0 * f[k] + 48.0 * f[k - 1] - 36.0 * f[k - 2] + 16.0 * f[k - 3] - 3.0 * f[k - 4])
            / (12.0 * self.step)
    }

    pub fn deriv2_right(&self) -> f64 {
        let k = self.len() - 1;
        let f = &self.values;
        (15.0 / 4.0 * f[k] - 77.0 / 6.0 * f[k - 1] + 107.0 / 6.0 * f[k - 2] - 13.0 * f[k - 3]
            + 61.0 / 12.0 * f[k - 4]
            - 5.0 / 6.0 * f[k - 5])
            / (self.step * self.step)
    }

    /// Centered first differences on the interior.
    pub fn central_derivative(&self) -> SampledFunction {
        let mut values = Vec::with_capacity(self.len().saturating_sub(2));
        for i in 1..self.len() - 1 {
            values.push((self.values[i + 1] - self.values[i - 1]) / (2.0 * self.step));
        }
        SampledFunction {
            x0: self.x(1),
            step: self.step,
            values,
        }
    }

    /// Centered second differences on the interior.
    pub fn central_second_derivative(&self) -> SampledFunction {
        let mut values = Vec::with_capacity(self.len().saturating_sub(2));
        for i in 1..self.len() - 1 {
            values.push(
                (self.values[i + 1] - 2.0 * self.values[i] + self.values[i - 1])
                    / (self.step * self.step),
            );
        }
        SampledFunction {
            x0: self.x(1),
            step: self.step,
            values,
        }
    }

    pub fn min_forward_difference(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Symmetric bump kernel `exp(-1/(1-(x/delta)^2))` discretized on the grid
/// and renormalized to unit mass exactly.
#[derive(Debug, Clone)]
pub struct MollifierFamily {
    pub half_width: usize,
    pub weights: Vec<f64>,
}

impl MollifierFamily {
    pub fn new(delta: f64, step: f64) -> Result<MollifierFamily, ApproxError> {
        let half = (delta / step + 1e-12).floor() as usize;
        if half < 2 {
            return Err(ApproxError::ResolutionTooCoarse { inv_n: delta, step });
        }
        let mut weights: Vec<f64> = (0..=2 * half)
            .map(|j| {
                let u = (j as f64 - half as f64) * step / delta;
                if u.abs() >= 1.0 {
                    0.0
                } else {
                    (-1.0 / (1.0 - u * u)).exp()
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        // force the unit-mass invariant exactly
        let drift: f64 = 1.0 - weights.iter().sum::<f64>();
        weights[half] += drift;
        Ok(MollifierFamily {
            half_width: half,
            weights,
        })
    }
}

/// Discrete convolution with the bump of support `1/n`; the output window
/// shrinks by the kernel half-width on each side. The sup norm never grows.
pub fn mollify(f: &SampledFunction, n: u32) -> Result<SampledFunction, ApproxError> {
    let kernel = MollifierFamily::new(1.0 / n as f64, f.step)?;
    let m = kernel.half_width;
    if f.len() < 2 * m + 2 {
        return Err(ApproxError::WindowTooSmall {
            len: f.len(),
            half: m,
        });
    }
    let values: Vec<f64> = (m..f.len() - m)
        .map(|i| {
            kernel
                .weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * f.values[i + m - j])
                .sum()
        })
        .collect();
    let out = SampledFunction {
        x0: f.x(m),
        step: f.step,
        values,
    };
    debug_assert!(out.norm_inf() <= f.norm_inf() * (1.0 + 1e-12) + 1e-300);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryVariant {
    /// Chord through `(e, f(e))` and `(e +- 1/n, f(e +- 1/n))`.
    Linear,
    /// Constant `n * integral of f over the first 1/n`.
    Average,
    /// Zero near the endpoint.
    Zero,
    /// Quadratic matched so that after mollification
    /// `gamma (T f)'(e) = (T f)''(e)`.
    HatPrime { gamma: f64 },
    /// Linear-times-average matched so that after mollification
    /// `gamma (T f)(e) = (T f)'(e)`.
    HatDoublePrime { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Left,
    Right,
}

/// Replace the values on `[e, e +- 1/n]` by the variant's interpolation
/// formula and extend the window beyond the endpoint by the mollifier
/// half-width, so a subsequent `mollify` lands back on the original window.
pub fn boundary_interp(
    f: &SampledFunction,
    n: u32,
    variant: BoundaryVariant,
    endpoint: Endpoint,
) -> Result<SampledFunction, ApproxError> {
    let inv_n = 1.0 / n as f64;
    let step = f.step;
    let m = (inv_n / step + 1e-12).floor() as usize;
    if m < 2 {
        return Err(ApproxError::ResolutionTooCoarse { inv_n, step });
    }
    // mirror the coordinate (and gamma) for a right endpoint
    let (e, sign) = match endpoint {
        Endpoint::Left => (f.x0, 1.0),
        Endpoint::Right => (f.x_end(), -1.0),
    };
    let f_e = match endpoint {
        Endpoint::Left => f.values[0],
        Endpoint::Right => f.values[f.len() - 1],
    };
    let f_in = f.at(e + sign * inv_n);
    let average = match endpoint {
        Endpoint::Left => f.integrate(e, e + inv_n) * n as f64,
        Endpoint::Right => f.integrate(e - inv_n, e) * n as f64,
    };
    let formula = |x: f64| -> f64 {
        // u is the distance into the domain; negative on the extension
        let u = sign * (x - e);
        match variant {
            BoundaryVariant::Linear => f_e + u * n as f64 * (f_in - f_e),
            BoundaryVariant::Average => average,
            BoundaryVariant::Zero => 0.0,
            BoundaryVariant::HatPrime { gamma } => {
                let g = sign * gamma;
                f_e + (0.5 * g * u * u + u) / (0.5 * g * inv_n + 1.0) * n as f64 * (f_in - f_e)
            }
            BoundaryVariant::HatDoublePrime { gamma } => {
                let g = sign * gamma;
                (g * u + 1.0) / (0.5 * g * inv_n + 1.0) * average
            }
        }
    };

    let ext = m; // extension in grid cells beyond the endpoint
    let mut values = Vec::with_capacity(f.len() + ext);
    let x0 = match endpoint {
        Endpoint::Left => f.x0 - ext as f64 * step,
        Endpoint::Right => f.x0,
    };
    let total = f.len() + ext;
    for i in 0..total {
        let x = x0 + step * i as f64;
        let u = sign * (x - e);
        if u < inv_n - 1e-12 {
            values.push(formula(x));
        } else {
            values.push(f.at(x));
        }
    }
    Ok(SampledFunction { x0, step, values })
}

/// Composite approximation operators: boundary interpolation at both window
/// endpoints followed by mollification, back on the original window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TVariant {
    /// Preserves increasing and convex functions.
    T,
    /// Preserves increasing (and decreasing) functions;
    /// `(T'f)''(e) = (T'f)'(e) = 0`.
    TPrime,
    /// Vanishes to second order at the endpoints.
    TDoublePrime,
    /// `gamma_e (T f)'(e) = (T f)''(e)` at each endpoint.
    THatPrime { gamma_left: f64, gamma_right: f64 },
    /// `gamma_e (T f)(e) = (T f)'(e)` at each endpoint.
    THatDoublePrime { gamma_left: f64, gamma_right: f64 },
}

pub fn apply_t(
    f: &SampledFunction,
    n: u32,
    variant: TVariant,
) -> Result<SampledFunction, ApproxError> {
    let (left, right) = match variant {
        TVariant::T => (BoundaryVariant::Linear, BoundaryVariant::Linear),
        TVariant::TPrime => (BoundaryVariant::Average, BoundaryVariant::Average),
        TVariant::TDoublePrime => (BoundaryVariant::Zero, BoundaryVariant::Zero),
        TVariant::THatPrime {
            gamma_left,
            gamma_right,
        } => (
            BoundaryVariant::HatPrime { gamma: gamma_left },
            BoundaryVariant::HatPrime { gamma: gamma_right },
        ),
        TVariant::THatDoublePrime {
            gamma_left,
            gamma_right,
        } => (
            BoundaryVariant::HatDoublePrime { gamma: gamma_left },
            BoundaryVariant::HatDoublePrime { gamma: gamma_right },
        ),
    };
    let stage1 = boundary_interp(f, n, left, Endpoint::Left)?;
    let stage2 = boundary_interp(&stage1, n, right, Endpoint::Right)?;
    mollify(&stage2, n)
}

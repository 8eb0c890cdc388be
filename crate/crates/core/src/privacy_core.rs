//! Rényi-DP accounting primitives.
//!
//! Everything here is a pure function of its arguments. Costs are carried as
//! [`ApproxRdp`] triples `(alpha, epsilon, delta)`: a mechanism is
//! `delta`-approximately `(alpha, epsilon)`-RDP. Conversion to an `(ε̂, δ̂)`-DP
//! statement happens only at reporting time.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;
use thiserror::Error;

/// Orders at which filters and calibration are evaluated.
pub const DEFAULT_ALPHA_GRID: [f64; 11] =
    [1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0];

const SIGMA_REL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountingError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("infeasible target: {0}")]
    Infeasible(String),
    #[error("unsupported Rényi order {0}: an integer order >= 2 is required")]
    UnsupportedOrder(f64),
}

fn invalid(msg: impl Into<String>) -> AccountingError {
    AccountingError::InvalidParameter(msg.into())
}

/// A Rényi order `alpha > 1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RenyiOrder(f64);

impl RenyiOrder {
    pub fn new(alpha: f64) -> Result<Self, AccountingError> {
        if !alpha.is_finite() || alpha <= 1.0 {
            return Err(invalid(format!("Rényi order must be finite and > 1, got {alpha}")));
        }
        Ok(Self(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The order as an integer, if it is one.
    pub fn as_integer(self) -> Option<u32> {
        (self.0.fract() == 0.0 && self.0 <= u32::MAX as f64).then_some(self.0 as u32)
    }
}

impl TryFrom<f64> for RenyiOrder {
    type Error = AccountingError;

    fn try_from(alpha: f64) -> Result<Self, Self::Error> {
        Self::new(alpha)
    }
}

impl From<RenyiOrder> for f64 {
    fn from(order: RenyiOrder) -> f64 {
        order.0
    }
}

/// The default order grid as validated orders.
pub fn default_alpha_grid() -> Vec<RenyiOrder> {
    DEFAULT_ALPHA_GRID.iter().map(|&a| RenyiOrder(a)).collect()
}

/// `delta`-approximate `(alpha, epsilon)`-RDP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxRdp {
    pub alpha: RenyiOrder,
    pub epsilon: f64,
    pub delta: f64,
}

impl ApproxRdp {
    pub fn new(alpha: RenyiOrder, epsilon: f64, delta: f64) -> Result<Self, AccountingError> {
        if !(epsilon >= 0.0) || epsilon.is_infinite() {
            return Err(invalid(format!("RDP epsilon must be finite and >= 0, got {epsilon}")));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(invalid(format!("delta must lie in [0, 1], got {delta}")));
        }
        Ok(Self { alpha, epsilon, delta })
    }
}

/// An `(ε̂, δ̂)`-DP statement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon_hat: f64,
    pub delta_hat: f64,
}

impl DpGuarantee {
    pub fn new(epsilon_hat: f64, delta_hat: f64) -> Result<Self, AccountingError> {
        if !(epsilon_hat >= 0.0) {
            return Err(invalid(format!("epsilon must be >= 0, got {epsilon_hat}")));
        }
        if !(delta_hat > 0.0 && delta_hat < 1.0) {
            return Err(invalid(format!("delta must lie in (0, 1), got {delta_hat}")));
        }
        Ok(Self { epsilon_hat, delta_hat })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMechanismSpec {
    pub sigma: f64,
    pub sensitivity: f64,
}

impl GaussianMechanismSpec {
    pub fn new(sigma: f64, sensitivity: f64) -> Result<Self, AccountingError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("sigma must be finite and > 0, got {sigma}")));
        }
        if !(sensitivity > 0.0) || !sensitivity.is_finite() {
            return Err(invalid(format!("sensitivity must be finite and > 0, got {sensitivity}")));
        }
        Ok(Self { sigma, sensitivity })
    }
}

/// Poisson inclusion probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub gamma: f64,
}

impl SamplingConfig {
    pub fn new(gamma: f64) -> Result<Self, AccountingError> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(invalid(format!("sampling rate must lie in [0, 1], got {gamma}")));
        }
        Ok(Self { gamma })
    }
}

/// RDP curve of the Gaussian mechanism: `alpha * Δ² / (2σ²)`.
pub fn gaussian_rdp(spec: GaussianMechanismSpec, alpha: RenyiOrder) -> ApproxRdp {
    let GaussianMechanismSpec { sigma, sensitivity } = spec;
    ApproxRdp {
        alpha,
        epsilon: alpha.0 * sensitivity * sensitivity / (2.0 * sigma * sigma),
        delta: 0.0,
    }
}

/// Pure ε-DP bounds every Rényi divergence by ε, and also by `alpha ε² / 2`.
pub fn pure_dp_to_rdp(epsilon: f64, alpha: RenyiOrder) -> Result<ApproxRdp, AccountingError> {
    if !(epsilon >= 0.0) {
        return Err(invalid(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let quadratic = alpha.0 * epsilon * epsilon / 2.0;
    Ok(ApproxRdp { alpha, epsilon: epsilon.min(quadratic), delta: 0.0 })
}

/// Sequential composition at a common order. Epsilons and deltas add; delta
/// saturates at 1.
pub fn compose(costs: &[ApproxRdp]) -> Result<ApproxRdp, AccountingError> {
    let first = costs.first().ok_or_else(|| invalid("cannot compose an empty list"))?;
    let alpha = first.alpha;
    let mut epsilon = 0.0;
    let mut delta = 0.0;
    for cost in costs {
        if cost.alpha != alpha {
            return Err(invalid(format!(
                "cannot compose costs at different orders ({} vs {})",
                alpha.0, cost.alpha.0
            )));
        }
        epsilon += cost.epsilon;
        delta += cost.delta;
    }
    Ok(ApproxRdp { alpha, epsilon, delta: delta.min(1.0) })
}

/// `ln( (1 - 1/alpha)^(alpha-1) / alpha )`, the order-dependent constant of
/// the RDP to DP conversion.
fn conversion_log_constant(alpha: f64) -> f64 {
    (alpha - 1.0) * (-1.0 / alpha).ln_1p() - alpha.ln()
}

/// Converts `delta`-approximate `(alpha, epsilon)`-RDP into `(ε̂, δ̂)`-DP with
/// `δ̂ = delta + exp((alpha-1)(epsilon - ε̂)) (1 - 1/alpha)^(alpha-1) / alpha`.
pub fn approx_rdp_to_dp(cost: ApproxRdp, epsilon_hat: f64) -> Result<DpGuarantee, AccountingError> {
    let alpha = cost.alpha.0;
    if !(alpha > 1.0) {
        return Err(invalid(format!("Rényi order must be > 1, got {alpha}")));
    }
    let log_tail = (alpha - 1.0) * (cost.epsilon - epsilon_hat) + conversion_log_constant(alpha);
    let delta_hat = (cost.delta + log_tail.exp()).min(1.0);
    Ok(DpGuarantee { epsilon_hat, delta_hat })
}

/// Smallest non-negative ε̂ at which [`approx_rdp_to_dp`] reaches `delta_hat`.
///
/// When the unconstrained solution is negative the returned ε̂ is 0, and the
/// conversion at 0 yields a δ̂ strictly below `delta_hat`. A zero RDP cost
/// gives ε̂ = 0 directly.
pub fn invert_conversion(cost: ApproxRdp, delta_hat: f64) -> Result<DpGuarantee, AccountingError> {
    let alpha = cost.alpha.0;
    if !(alpha > 1.0) {
        return Err(invalid(format!("Rényi order must be > 1, got {alpha}")));
    }
    if !(delta_hat < 1.0) {
        return Err(invalid(format!("target delta must be < 1, got {delta_hat}")));
    }
    let slack = delta_hat - cost.delta;
    if !(slack > 0.0) {
        return Err(AccountingError::Infeasible(format!(
            "target delta {delta_hat} does not exceed the approximation delta {}",
            cost.delta
        )));
    }
    if cost.epsilon == 0.0 {
        // zero divergence: the output distributions coincide
        return Ok(DpGuarantee { epsilon_hat: 0.0, delta_hat });
    }
    let epsilon_hat =
        cost.epsilon + (conversion_log_constant(alpha) - slack.ln()) / (alpha - 1.0);
    Ok(DpGuarantee { epsilon_hat: epsilon_hat.max(0.0), delta_hat })
}

/// Best guarantee over a set of orders for a cost curve evaluated per order.
pub fn best_guarantee<F>(
    alpha_grid: &[RenyiOrder],
    delta_hat: f64,
    mut cost_at: F,
) -> Result<(DpGuarantee, RenyiOrder), AccountingError>
where
    F: FnMut(RenyiOrder) -> Result<ApproxRdp, AccountingError>,
{
    let mut best: Option<(DpGuarantee, RenyiOrder)> = None;
    let mut last_err = None;
    for &alpha in alpha_grid {
        match cost_at(alpha).and_then(|cost| invert_conversion(cost, delta_hat)) {
            Ok(g) => {
                if best.is_none_or(|(b, _)| g.epsilon_hat < b.epsilon_hat) {
                    best = Some((g, alpha));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| invalid("empty Rényi order grid")))
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// RDP of a mechanism run on a Poisson subsample.
///
/// `base` gives the mechanism's RDP epsilon at each integer order. The
/// returned epsilon is the generic integer-order amplification bound at the
/// adjusted rate `γ(1-δ)/(1-γδ)`, capped at the unamplified `base(alpha)`;
/// the returned delta is `γδ`.
pub fn subsampled_rdp<F>(
    base: F,
    sampling: SamplingConfig,
    delta: f64,
    alpha: RenyiOrder,
) -> Result<ApproxRdp, AccountingError>
where
    F: Fn(u32) -> f64,
{
    let order = match alpha.as_integer() {
        Some(order) if order >= 2 => order,
        _ => return Err(AccountingError::UnsupportedOrder(alpha.0)),
    };
    SamplingConfig::new(sampling.gamma)?;
    if !(0.0..=1.0).contains(&delta) {
        return Err(invalid(format!("delta must lie in [0, 1], got {delta}")));
    }
    let gamma = sampling.gamma;
    let base_at_order = base(order);
    if gamma == 0.0 {
        return Ok(ApproxRdp { alpha, epsilon: 0.0, delta: 0.0 });
    }
    let rate = gamma * (1.0 - delta) / (1.0 - gamma * delta);
    let log_rate = rate.ln();

    let mut log_terms = Vec::with_capacity(order as usize);
    log_terms.push(0.0);
    let eps2 = base(2);
    // min(4(e^ε - 1), 2e^ε) in log space
    let log_second = (std::f64::consts::LN_2 * 2.0 + eps2.exp_m1().ln()).min(std::f64::consts::LN_2 + eps2);
    log_terms.push(2.0 * log_rate + ln_binomial(order as u64, 2) + log_second);
    for j in 3..=order {
        log_terms.push(
            j as f64 * log_rate
                + ln_binomial(order as u64, j as u64)
                + std::f64::consts::LN_2
                + (j - 1) as f64 * base(j),
        );
    }
    let amplified = log_sum_exp(&log_terms) / (order - 1) as f64;
    Ok(ApproxRdp {
        alpha,
        epsilon: amplified.min(base_at_order).max(0.0),
        delta: (gamma * delta).min(1.0),
    })
}

/// The classical single-shot Gaussian calibration
/// `Δ·sqrt(2T ln(1.25/δ))/ε`.
pub fn classical_gaussian_sigma(target: DpGuarantee, sensitivity: f64, uses: u32) -> f64 {
    sensitivity * (2.0 * uses as f64 * (1.25 / target.delta_hat).ln()).sqrt() / target.epsilon_hat
}

/// Smallest noise scale for which some order in `alpha_grid` certifies
/// `target`, where `cost_at(sigma, alpha)` is the total RDP cost at that noise.
/// Returns the noise scale and the certifying order.
pub fn calibrate_noise<F>(
    target: DpGuarantee,
    alpha_grid: &[RenyiOrder],
    cost_at: F,
) -> Result<(f64, RenyiOrder), AccountingError>
where
    F: Fn(f64, RenyiOrder) -> Result<ApproxRdp, AccountingError>,
{
    if alpha_grid.is_empty() {
        return Err(invalid("empty Rényi order grid"));
    }
    if !(target.epsilon_hat > 0.0) {
        return Err(invalid("target epsilon must be > 0"));
    }
    if !(target.delta_hat > 0.0 && target.delta_hat < 1.0) {
        return Err(invalid("target delta must lie in (0, 1)"));
    }
    let meets = |sigma: f64| -> Option<RenyiOrder> {
        best_guarantee(alpha_grid, target.delta_hat, |alpha| cost_at(sigma, alpha))
            .ok()
            .filter(|(g, _)| g.epsilon_hat <= target.epsilon_hat)
            .map(|(_, alpha)| alpha)
    };

    let mut hi = 1.0;
    let mut steps = 0;
    while meets(hi).is_none() {
        hi *= 2.0;
        steps += 1;
        if steps > 200 {
            return Err(AccountingError::Infeasible(format!(
                "no noise scale certifies ({}, {})",
                target.epsilon_hat, target.delta_hat
            )));
        }
    }
    let mut lo = hi / 2.0;
    steps = 0;
    while meets(lo).is_some() {
        hi = lo;
        lo /= 2.0;
        steps += 1;
        if steps > 1100 {
            return Ok((hi, meets(hi).expect("feasible")));
        }
    }
    while hi / lo - 1.0 > SIGMA_REL_TOL * 0.5 {
        let mid = (lo * hi).sqrt();
        if meets(mid).is_some() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let alpha_star = meets(hi).expect("upper bracket is feasible");
    Ok((hi, alpha_star))
}

/// Smallest Gaussian noise scale such that `uses` compositions of the
/// Gaussian mechanism with the given sensitivity satisfy `target`.
pub fn calibrate_sigma(
    target: DpGuarantee,
    sensitivity: f64,
    uses: u32,
    alpha_grid: &[RenyiOrder],
) -> Result<(f64, RenyiOrder), AccountingError> {
    if uses == 0 {
        return Err(invalid("number of uses must be >= 1"));
    }
    if !(sensitivity > 0.0) || !sensitivity.is_finite() {
        return Err(invalid(format!("sensitivity must be finite and > 0, got {sensitivity}")));
    }
    calibrate_noise(target, alpha_grid, |sigma, alpha| {
        let spec = GaussianMechanismSpec::new(sigma, sensitivity)?;
        let once = gaussian_rdp(spec, alpha);
        Ok(ApproxRdp { epsilon: once.epsilon * uses as f64, ..once })
    })
}

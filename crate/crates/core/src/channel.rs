//! Air-to-ground URLLC link model.
//!
//! Mean path loss with a sigmoid line-of-sight term, SNR from the link
//! budget, the finite-blocklength normal approximation for the block error
//! rate, and the inverse solvers built on top of it (required SNR, coverage
//! radius, minimum transmission time).
//!
//! The rate entering the normal approximation is `payload_bits / T`, so for a
//! given SNR the error rate is a function of the transmission duration `T`
//! alone. With `T = payload_bits / bandwidth` the rate term is exactly `ln 2`
//! nats per channel use.

use std::f64::consts::{LN_2, PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{bisect, Tolerance};

/// Upper end of the bracket used when searching for the coverage radius.
pub const RANGE_SEARCH_CEILING_M: f64 = 1.0e6;
/// Bracket for the required-SNR search, linear scale.
pub const SNR_BRACKET: (f64, f64) = (1.0e-6, 1.0e9);
/// Bracket for the minimum-latency search, seconds.
pub const LATENCY_BRACKET_S: (f64, f64) = (1.0e-9, 1.0);

// Bisection is run until the bracket collapses to a few ulps. The nominal
// tolerances (1e-9 relative SNR, 1e-2 m, 1e-6 relative latency) are all looser.
const COLLAPSE: Tolerance = Tolerance::Relative(1.0e-15);

/// Converts a power ratio in dB to linear scale.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Converts a linear power ratio to dB.
pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// Radio constants of the air-to-ground link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Environmental constant of the LoS probability sigmoid.
    pub alpha: f64,
    /// Environmental constant of the LoS probability sigmoid.
    pub beta: f64,
    /// Excess path loss under line of sight, dB.
    pub eta_los: f64,
    /// Excess path loss without line of sight, dB.
    pub eta_nlos: f64,
    /// Hz.
    pub carrier_freq: f64,
    /// m/s.
    pub light_speed: f64,
    /// dBm.
    pub tx_power: f64,
    /// dBm.
    pub noise_power: f64,
    /// Hz.
    pub bandwidth: f64,
    /// Bits per packet.
    pub payload_bits: f64,
    /// UAV altitude, m.
    pub altitude: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            alpha: 9.61,
            beta: 0.16,
            eta_los: 1.0,
            eta_nlos: 20.0,
            carrier_freq: 2.0e9,
            light_speed: 299_792_458.0,
            tx_power: 46.0,
            noise_power: -99.0,
            bandwidth: 20.0e6,
            payload_bits: 576.0,
            altitude: DEFAULT_ALTITUDE_M,
        }
    }
}

/// Default altitude produced by [`calibrate_altitude`] for the default
/// constants: the end of the `[10, 2000]` m search interval whose coverage
/// radius is closest to 938 m (no altitude in the interval reaches it).
pub const DEFAULT_ALTITUDE_M: f64 = 10.0;

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("eta_los", self.eta_los),
            ("eta_nlos", self.eta_nlos),
            ("carrier_freq", self.carrier_freq),
            ("light_speed", self.light_speed),
            ("tx_power", self.tx_power),
            ("noise_power", self.noise_power),
            ("bandwidth", self.bandwidth),
            ("payload_bits", self.payload_bits),
            ("altitude", self.altitude),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Config(format!(
                "channel parameter {name} is not finite"
            )));
        }
        if self.bandwidth <= 0.0
            || self.payload_bits <= 0.0
            || self.carrier_freq <= 0.0
            || self.altitude <= 0.0
            || self.light_speed <= 0.0
        {
            return Err(Error::Config(
                "bandwidth, payload_bits, carrier_freq, light_speed and altitude must be positive"
                    .into(),
            ));
        }
        if self.eta_nlos < self.eta_los {
            return Err(Error::Config("eta_nlos must be at least eta_los".into()));
        }
        Ok(())
    }

    /// `P_t - P_n` in dB.
    pub fn link_budget_db(&self) -> f64 {
        self.tx_power - self.noise_power
    }

    /// Transmission time of one packet at one bit per channel use, `L_B / W`.
    pub fn max_transmission_time(&self) -> f64 {
        self.payload_bits / self.bandwidth
    }
}

/// Reliability and latency target of the ground link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UrllcRequirement {
    pub target_error: f64,
    pub target_latency: f64,
}

impl Default for UrllcRequirement {
    fn default() -> Self {
        Self {
            target_error: 1.0e-7,
            target_latency: 39.0e-6,
        }
    }
}

impl UrllcRequirement {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_error > 0.0 && self.target_error < 0.5) {
            return Err(Error::Domain(format!(
                "target error {} outside (0, 0.5)",
                self.target_error
            )));
        }
        if !(self.target_latency > 0.0 && self.target_latency.is_finite()) {
            return Err(Error::Domain(format!(
                "target latency {} must be positive",
                self.target_latency
            )));
        }
        Ok(())
    }
}

fn require_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {v} is not finite")))
    }
}

fn check_target_error(eps0: f64) -> Result<()> {
    if eps0 > 0.0 && eps0 < 0.5 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "target error {eps0} outside (0, 0.5)"
        )))
    }
}

/// Mean air-to-ground path loss in dB for horizontal distance `d` and
/// altitude `h`.
pub fn path_loss(d: f64, h: f64, p: &ChannelParams) -> Result<f64> {
    require_finite("distance", d)?;
    require_finite("altitude", h)?;
    if d < 0.0 {
        return Err(Error::Domain(format!("distance {d} is negative")));
    }
    if h <= 0.0 {
        return Err(Error::Domain(format!("altitude {h} must be positive")));
    }
    let elevation_deg = h.atan2(d).to_degrees();
    let los_term =
        (p.eta_los - p.eta_nlos) / (1.0 + p.alpha * (-p.beta * (elevation_deg - p.alpha)).exp());
    let free_space = 10.0 * (h * h + d * d).log10();
    let carrier = 20.0 * (4.0 * PI * p.carrier_freq / p.light_speed).log10();
    Ok(los_term + free_space + carrier + p.eta_nlos)
}

/// Linear SNR for a given path loss.
pub fn snr_from_path_loss(pl_db: f64, p: &ChannelParams) -> f64 {
    db_to_linear(p.link_budget_db() - pl_db)
}

/// Linear SNR at horizontal distance `d` and altitude `h`.
pub fn snr(d: f64, h: f64, p: &ChannelParams) -> Result<f64> {
    Ok(snr_from_path_loss(path_loss(d, h, p)?, p))
}

/// Gaussian upper tail probability.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// Inverse of [`q_function`] on `(0, 1)`, to `|dx| < 1e-9`.
pub fn q_function_inv(prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::Domain(format!("probability {prob} outside (0, 1)")));
    }
    // Q(-40) rounds to 1 and Q(40) underflows to 0, so every representable
    // probability in (0, 1) has its root inside this bracket.
    bisect(
        |x| q_function(x) - prob,
        -40.0,
        40.0,
        Tolerance::Absolute(1.0e-10),
    )
}

/// Argument of the Q-function in the normal approximation.
///
/// `sqrt(W T / V) * (ln(1 + SNR) - L_B ln2 / (W T))` with channel dispersion
/// `V = 1 - (1 + SNR)^-2`.
pub fn blocklength_argument(snr: f64, t: f64, p: &ChannelParams) -> Result<f64> {
    require_finite("snr", snr)?;
    require_finite("transmission time", t)?;
    if snr <= 0.0 {
        return Err(Error::Domain(format!("snr {snr} must be positive")));
    }
    if t <= 0.0 {
        return Err(Error::Domain(format!(
            "transmission time {t} must be positive"
        )));
    }
    let channel_uses = p.bandwidth * t;
    let dispersion = 1.0 - (1.0 + snr).powi(-2);
    let rate_nats = p.payload_bits * LN_2 / channel_uses;
    Ok((channel_uses / dispersion).sqrt() * (snr.ln_1p() - rate_nats))
}

/// Block error probability for one packet sent over duration `t_max`.
pub fn error_rate(snr: f64, t_max: f64, p: &ChannelParams) -> Result<f64> {
    Ok(q_function(blocklength_argument(snr, t_max, p)?))
}

/// Achievable rate in nats per channel use at target error `eps0`.
pub fn achievable_throughput(snr: f64, eps0: f64, p: &ChannelParams) -> Result<f64> {
    require_finite("snr", snr)?;
    if snr <= 0.0 {
        return Err(Error::Domain(format!("snr {snr} must be positive")));
    }
    let dispersion = 1.0 - (1.0 + snr).powi(-2);
    Ok(snr.ln_1p() - dispersion / p.payload_bits * q_function_inv(eps0)?)
}

/// Smallest linear SNR whose error rate at `t_max` does not exceed `eps0`.
pub fn required_snr(eps0: f64, t_max: f64, p: &ChannelParams) -> Result<f64> {
    check_target_error(eps0)?;
    let (lo, hi) = SNR_BRACKET;
    let g = |s: f64| {
        error_rate(s, t_max, p)
            .map(|e| e - eps0)
            .unwrap_or(f64::NAN)
    };
    if g(hi) > 0.0 {
        return Err(Error::Solver(format!(
            "error rate {eps0} not reachable below SNR {hi} at T = {t_max} s"
        )));
    }
    if g(lo) <= 0.0 {
        return Err(Error::Solver(format!(
            "error rate {eps0} already met at SNR {lo}; bracket too wide"
        )));
    }
    bisect(g, lo, hi, COLLAPSE)
}

/// Path loss threshold (dB) below which the reliability target is met.
pub fn path_loss_threshold(eps0: f64, t_max: f64, p: &ChannelParams) -> Result<f64> {
    Ok(-linear_to_db(
        db_to_linear(-p.link_budget_db()) * required_snr(eps0, t_max, p)?,
    ))
}

/// Horizontal coverage radius at the configured altitude: the distance where
/// the path loss equals the reliability threshold.
pub fn urllc_range(eps0: f64, t_max: f64, p: &ChannelParams) -> Result<f64> {
    p.validate()?;
    let threshold = path_loss_threshold(eps0, t_max, p)?;
    let h = p.altitude;
    let g = |d: f64| {
        path_loss(d, h, p)
            .map(|pl| pl - threshold)
            .unwrap_or(f64::NAN)
    };
    if g(0.0) > 0.0 {
        return Err(Error::Solver(format!(
            "path loss at d = 0 already exceeds the {threshold:.3} dB threshold (altitude {h} m)"
        )));
    }
    if g(RANGE_SEARCH_CEILING_M) < 0.0 {
        return Err(Error::Solver(format!(
            "coverage radius exceeds the {RANGE_SEARCH_CEILING_M} m search ceiling"
        )));
    }
    bisect(g, 0.0, RANGE_SEARCH_CEILING_M, COLLAPSE)
}

/// Shortest transmission time meeting `eps0` at the given SNR, or `None`
/// when even [`LATENCY_BRACKET_S`]`.1` is not enough.
pub fn min_latency(snr: f64, eps0: f64, p: &ChannelParams) -> Result<Option<f64>> {
    check_target_error(eps0)?;
    if snr <= 0.0 || !snr.is_finite() {
        return Err(Error::Domain(format!(
            "snr {snr} must be positive and finite"
        )));
    }
    let (lo, hi) = LATENCY_BRACKET_S;
    let g = |t: f64| error_rate(snr, t, p).map(|e| e - eps0).unwrap_or(f64::NAN);
    if g(hi) > 0.0 {
        return Ok(None);
    }
    if g(lo) <= 0.0 {
        return Ok(Some(lo));
    }
    bisect(g, lo, hi, COLLAPSE).map(Some)
}

/// Result of the altitude calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AltitudeCalibration {
    pub altitude: f64,
    pub range: f64,
    pub target_range: f64,
    /// False when no altitude in the search interval reaches the target
    /// range; `altitude` is then the closest achievable end point.
    pub exact: bool,
}

/// Finds the altitude whose coverage radius equals `target_range`.
///
/// Falls back to the end of `[h_lo, h_hi]` with the closest radius when the
/// target is out of reach.
pub fn calibrate_altitude(
    target_range: f64,
    eps0: f64,
    t_max: f64,
    p: &ChannelParams,
    (h_lo, h_hi): (f64, f64),
) -> Result<AltitudeCalibration> {
    let range_at = |h: f64| -> Result<f64> {
        let mut q = p.clone();
        q.altitude = h;
        urllc_range(eps0, t_max, &q)
    };
    let r_lo = range_at(h_lo)?;
    let r_hi = range_at(h_hi)?;
    let below_lo = r_lo < target_range;
    let below_hi = r_hi < target_range;
    if below_lo == below_hi {
        let (altitude, range) = if (r_lo - target_range).abs() <= (r_hi - target_range).abs() {
            (h_lo, r_lo)
        } else {
            (h_hi, r_hi)
        };
        return Ok(AltitudeCalibration {
            altitude,
            range,
            target_range,
            exact: false,
        });
    }
    let altitude = bisect(
        |h| range_at(h).map(|r| r - target_range).unwrap_or(f64::NAN),
        h_lo,
        h_hi,
        Tolerance::Absolute(1.0e-6),
    )?;
    Ok(AltitudeCalibration {
        altitude,
        range: range_at(altitude)?,
        target_range,
        exact: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ChannelParams {
        ChannelParams::default()
    }

    #[test]
    fn transmission_time_is_28_8_us() {
        let t = params().max_transmission_time();
        assert!((t - 28.8e-6).abs() < 1e-18);
    }

    #[test]
    fn path_loss_at_zero_distance_matches_hand_value() {
        // 40-digit evaluation of the closed form at 90 degrees elevation
        let pl = path_loss(0.0, 10.0, &params()).unwrap();
        assert!((pl - 59.468_856_718_942_84).abs() < 1e-9, "{pl}");
        let pl = path_loss(0.0, 100.0, &params()).unwrap();
        assert!((pl - 79.468_856_718_942_84).abs() < 1e-9, "{pl}");
        let pl = path_loss(1000.0, 100.0, &params()).unwrap();
        assert!((pl - 117.508_121_505_552_08).abs() < 1e-9, "{pl}");
    }

    #[test]
    fn path_loss_is_monotone_in_distance() {
        let p = params();
        assert!(path_loss(2000.0, 100.0, &p).unwrap() > path_loss(1000.0, 100.0, &p).unwrap());
    }

    #[test]
    fn path_loss_rejects_bad_inputs() {
        let p = params();
        assert!(path_loss(f64::NAN, 100.0, &p).is_err());
        assert!(path_loss(10.0, f64::INFINITY, &p).is_err());
        assert!(path_loss(-1.0, 100.0, &p).is_err());
        assert!(path_loss(1.0, 0.0, &p).is_err());
    }

    #[test]
    fn budget_cancellation_gives_unit_snr() {
        assert_eq!(snr_from_path_loss(145.0, &params()), 1.0);
    }

    #[test]
    fn snr_decreases_with_distance() {
        let p = params();
        assert!(snr(100.0, 50.0, &p).unwrap() > snr(200.0, 50.0, &p).unwrap());
    }

    #[test]
    fn q_function_basics() {
        assert_eq!(q_function(0.0), 0.5);
        let x = q_function_inv(q_function(3.0)).unwrap();
        assert!((x - 3.0).abs() < 1e-6);
        assert!(q_function_inv(0.0).is_err());
        assert!(q_function_inv(1.0).is_err());
        assert!(q_function_inv(f64::NAN).is_err());
    }

    #[test]
    fn q_function_inv_of_1e_minus_7() {
        let x = q_function_inv(1e-7).unwrap();
        assert!((x - 5.199_337_582_192_817).abs() < 1e-9, "{x}");
    }

    #[test]
    fn zero_argument_gives_half() {
        // ln(1 + SNR) = ln 2 at T = L_B / W, i.e. SNR = 1
        let p = params();
        let e = error_rate(1.0, p.max_transmission_time(), &p).unwrap();
        assert!((e - 0.5).abs() < 1e-15);
    }

    #[test]
    fn error_rate_rejects_nonpositive_snr() {
        let p = params();
        assert!(error_rate(0.0, 1e-5, &p).is_err());
        assert!(error_rate(-1.0, 1e-5, &p).is_err());
        assert!(error_rate(1.0, 0.0, &p).is_err());
    }

    #[test]
    fn throughput_limits() {
        let p = params();
        let r = achievable_throughput(10.0, 0.5, &p).unwrap();
        assert!((r - 11f64.ln()).abs() < 1e-9);
        let big = 1e12;
        let r = achievable_throughput(big, 1e-7, &p).unwrap();
        let limit = big.ln_1p() - q_function_inv(1e-7).unwrap() / 576.0;
        assert!((r - limit).abs() < 1e-12);
        let r = achievable_throughput(10.0, 1e-7, &p).unwrap();
        assert!((r - 2.388_943_245_280_821).abs() < 1e-9, "{r}");
    }

    #[test]
    fn required_snr_frozen_value() {
        let p = params();
        let s = required_snr(1e-7, p.max_transmission_time(), &p).unwrap();
        assert!((s - 1.436_846_620_168_442).abs() < 1e-12, "{s}");
        let e = error_rate(s, p.max_transmission_time(), &p).unwrap();
        assert!((e - 1e-7).abs() <= 1e-9 * 1e-7, "{e}");
    }

    #[test]
    fn required_snr_grows_as_target_tightens() {
        let p = params();
        let t = p.max_transmission_time();
        let loose = required_snr(1e-3, t, &p).unwrap();
        let tight = required_snr(1e-7, t, &p).unwrap();
        assert!(tight > loose);
        assert!(required_snr(0.5, t, &p).is_err());
    }

    #[test]
    fn range_at_default_altitude() {
        let p = params();
        let t = p.max_transmission_time();
        let d = urllc_range(1e-7, t, &p).unwrap();
        assert!((d - 18_567.573_423_508_97).abs() < 1e-6, "{d}");
        let e = error_rate(snr(d, p.altitude, &p).unwrap(), t, &p).unwrap();
        assert!((e - 1e-7).abs() < 1e-6 * 1e-7);
        let inside = error_rate(snr(d - 1.0, p.altitude, &p).unwrap(), t, &p).unwrap();
        assert!(inside < 1e-7);
    }

    #[test]
    fn range_unreachable_when_budget_too_small() {
        let mut p = params();
        p.tx_power = -60.0;
        let err = urllc_range(1e-7, p.max_transmission_time(), &p).unwrap_err();
        assert!(matches!(err, Error::Solver(_)));
    }

    #[test]
    fn min_latency_at_range_is_t_max() {
        let p = params();
        let t = p.max_transmission_time();
        let d = urllc_range(1e-7, t, &p).unwrap();
        let lat = min_latency(snr(d, p.altitude, &p).unwrap(), 1e-7, &p)
            .unwrap()
            .unwrap();
        assert!((lat - t).abs() < 0.005 * t, "{lat}");
    }

    #[test]
    fn min_latency_saturates_for_hopeless_link() {
        let p = params();
        assert_eq!(min_latency(1e-9, 1e-7, &p).unwrap(), None);
    }

    #[test]
    fn min_latency_decreases_with_snr() {
        let p = params();
        let a = min_latency(2.0, 1e-7, &p).unwrap().unwrap();
        let b = min_latency(20.0, 1e-7, &p).unwrap().unwrap();
        assert!(b < a);
    }

    #[test]
    fn calibration_reports_closest_end_point() {
        let p = params();
        let cal =
            calibrate_altitude(938.0, 1e-7, p.max_transmission_time(), &p, (10.0, 2000.0)).unwrap();
        assert!(!cal.exact);
        assert_eq!(cal.altitude, 10.0);
    }

    #[test]
    fn calibration_hits_reachable_target() {
        let p = params();
        let t = p.max_transmission_time();
        let cal = calibrate_altitude(19_000.0, 1e-7, t, &p, (10.0, 2000.0)).unwrap();
        assert!(cal.exact);
        assert!((cal.range - 19_000.0).abs() < 0.01, "{cal:?}");
    }

    #[test]
    fn validate_catches_bad_params() {
        let mut p = params();
        p.eta_nlos = 0.0;
        assert!(p.validate().is_err());
        let mut p = params();
        p.bandwidth = 0.0;
        assert!(p.validate().is_err());
        assert!(UrllcRequirement {
            target_error: 0.7,
            target_latency: 1.0
        }
        .validate()
        .is_err());
    }
}

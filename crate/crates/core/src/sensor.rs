//! Output side of the IR range/bearing sensor: the magnitude-to-range power
//! law, its per-robot calibration fit, and synthesis of noisy observations
//! from ground truth.

use std::io::Read;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{displacement, wrap_angle, Observation, Pose2D};

/// Ranges are never reported below this floor (cm).
pub const RANGE_FLOOR: f64 = 0.1;

/// `D = amplitude * M^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawCalibration {
    pub amplitude: f64,
    pub exponent: f64,
    /// Readings at or below this range (cm) are saturated and not fitted.
    pub saturation_range: f64,
}

impl PowerLawCalibration {
    pub fn new(amplitude: f64, exponent: f64, saturation_range: f64) -> Result<Self> {
        let cal = Self {
            amplitude,
            exponent,
            saturation_range,
        };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.exponent.is_finite()) {
            return Err(Error::NonFinite("calibration"));
        }
        if self.amplitude <= 0.0 {
            return Err(Error::invalid(format!(
                "calibration amplitude must be > 0, got {}",
                self.amplitude
            )));
        }
        if self.exponent >= 0.0 {
            return Err(Error::invalid(format!(
                "calibration exponent must be < 0, got {}",
                self.exponent
            )));
        }
        Ok(())
    }

    /// Inverse of [`magnitude_to_range`], for synthesizing calibration data.
    pub fn range_to_magnitude(&self, range: f64) -> f64 {
        (range / self.amplitude).powf(1.0 / self.exponent)
    }
}

pub fn magnitude_to_range(cal: &PowerLawCalibration, magnitude: f64) -> Result<f64> {
    if !magnitude.is_finite() {
        return Err(Error::NonFinite("magnitude"));
    }
    if magnitude <= 0.0 {
        return Err(Error::invalid(format!(
            "magnitude must be > 0, got {magnitude}"
        )));
    }
    Ok(cal.amplitude * magnitude.powf(cal.exponent))
}

/// Result of [`fit_power_law`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub calibration: PowerLawCalibration,
    pub n_samples_used: usize,
    /// RMS of `ln D - (ln A + b ln M)` over the fitted samples.
    pub rms_log_residual: f64,
}

/// Log-log least squares fit of `(range_cm, magnitude)` samples.
///
/// Samples with range at or below `saturation_range` are dropped before
/// fitting; at least three must remain.
pub fn fit_power_law(samples: &[(f64, f64)], saturation_range: f64) -> Result<PowerLawFit> {
    if !saturation_range.is_finite() {
        return Err(Error::NonFinite("saturation range"));
    }
    let mut pts = Vec::with_capacity(samples.len());
    for (i, &(range, magnitude)) in samples.iter().enumerate() {
        if !(range.is_finite() && magnitude.is_finite()) {
            return Err(Error::Calibration(format!("sample {i} is not finite")));
        }
        if range <= saturation_range {
            continue;
        }
        if magnitude <= 0.0 {
            return Err(Error::Calibration(format!(
                "sample {i} has non-positive magnitude {magnitude}"
            )));
        }
        pts.push((magnitude.ln(), range.ln()));
    }
    if pts.len() < 3 {
        return Err(Error::Calibration(format!(
            "need at least 3 samples beyond the saturation range of {saturation_range} cm, got {}",
            pts.len()
        )));
    }

    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in &pts {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx <= f64::EPSILON * n * mean_x.abs().max(1.0) {
        return Err(Error::Calibration(
            "magnitudes do not vary; exponent is undetermined".into(),
        ));
    }
    let exponent = sxy / sxx;
    let log_amp = mean_y - exponent * mean_x;
    let ss: f64 = pts
        .iter()
        .map(|&(x, y)| {
            let r = y - (log_amp + exponent * x);
            r * r
        })
        .sum();

    let calibration = PowerLawCalibration {
        amplitude: log_amp.exp(),
        exponent,
        saturation_range,
    };
    calibration.validate().map_err(|e| {
        Error::Calibration(format!("fitted curve is not a decaying power law: {e}"))
    })?;

    Ok(PowerLawFit {
        calibration,
        n_samples_used: pts.len(),
        rms_log_residual: (ss / n).sqrt(),
    })
}

/// Reads `(range_cm, magnitude)` samples from a CSV with a header row.
pub fn read_calibration_csv<R: Read>(reader: R) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<String> = headers.iter().map(|h| h.to_ascii_lowercase()).collect();
    if names.len() < 2 || names[0] != "range_cm" || names[1] != "magnitude" {
        return Err(Error::invalid(format!(
            "calibration CSV header must be `range_cm,magnitude`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let line = i + 2;
        let field = |k: usize, name: &str| -> Result<f64> {
            rec.get(k)
                .ok_or_else(|| Error::invalid(format!("line {line}: missing {name}")))?
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("line {line}: bad {name}: {e}")))
        };
        out.push((field(0, "range_cm")?, field(1, "magnitude")?));
    }
    Ok(out)
}

/// Noise and geometry of the synthesized sensor.
///
/// Zero sigmas are accepted so noise-free scenarios can be generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorNoiseModel {
    pub sigma_dist: f64,
    pub sigma_angle: f64,
    #[serde(default)]
    pub outlier_probability: f64,
    /// Uniform range offset (cm) applied instead of Gaussian noise on outliers.
    #[serde(default = "default_outlier_offsets")]
    pub outlier_offset_range: (f64, f64),
    pub max_range: f64,
    #[serde(default)]
    pub angular_resolution: f64,
    /// Systematic multiplicative range error, e.g. 0.05 reads every range 5% long.
    #[serde(default)]
    pub range_bias: f64,
}

fn default_outlier_offsets() -> (f64, f64) {
    (30.0, 60.0)
}

impl Default for SensorNoiseModel {
    /// Measured hardware characteristics: σ_dist = 15 cm, σ_angle = 0.15 rad,
    /// 1 m sensing radius, 2° scan resolution.
    fn default() -> Self {
        Self {
            sigma_dist: 15.0,
            sigma_angle: 0.15,
            outlier_probability: 0.0,
            outlier_offset_range: default_outlier_offsets(),
            max_range: 100.0,
            angular_resolution: 2f64.to_radians(),
            range_bias: 0.0,
        }
    }
}

impl SensorNoiseModel {
    pub fn noise_free(max_range: f64) -> Self {
        Self {
            sigma_dist: 0.0,
            sigma_angle: 0.0,
            outlier_probability: 0.0,
            outlier_offset_range: (0.0, 0.0),
            max_range,
            angular_resolution: 0.0,
            range_bias: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.sigma_dist,
            self.sigma_angle,
            self.outlier_probability,
            self.outlier_offset_range.0,
            self.outlier_offset_range.1,
            self.max_range,
            self.angular_resolution,
            self.range_bias,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sensor model"));
        }
        if self.sigma_dist < 0.0 || self.sigma_angle < 0.0 {
            return Err(Error::invalid("sensor sigmas must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.outlier_probability) {
            return Err(Error::invalid(format!(
                "outlier_probability must lie in [0, 1), got {}",
                self.outlier_probability
            )));
        }
        if self.outlier_offset_range.0 > self.outlier_offset_range.1 {
            return Err(Error::invalid("outlier_offset_range is reversed"));
        }
        if self.max_range <= 0.0 {
            return Err(Error::invalid(format!(
                "max_range must be > 0, got {}",
                self.max_range
            )));
        }
        if self.angular_resolution < 0.0 {
            return Err(Error::invalid("angular_resolution must be >= 0"));
        }
        if self.range_bias <= -1.0 {
            return Err(Error::invalid("range_bias must be > -1"));
        }
        Ok(())
    }

    fn quantize(&self, bearing: f64) -> f64 {
        if self.angular_resolution > 0.0 {
            wrap_angle((bearing / self.angular_resolution).round() * self.angular_resolution)
        } else {
            wrap_angle(bearing)
        }
    }
}

/// Synthesizes what `observer` reports about `target`, or `None` when the
/// target is beyond `max_range`.
///
/// Every call consumes the same number of draws from `rng`, whether or not
/// the target is in range, so traces stay aligned across noise settings.
pub fn sense<R: Rng + ?Sized>(
    observer_id: usize,
    observer: &Pose2D,
    target_id: usize,
    target: &Pose2D,
    model: &SensorNoiseModel,
    rng: &mut R,
) -> Result<Option<Observation>> {
    let d = displacement(observer, target);
    let true_range = d.norm();
    if true_range == 0.0 {
        return Err(Error::Degenerate(format!(
            "robots {observer_id} and {target_id} occupy the same position"
        )));
    }

    let z_range: f64 = rng.sample(StandardNormal);
    let u_outlier: f64 = rng.random();
    let u_offset: f64 = rng.random();
    let z_bearing: f64 = rng.sample(StandardNormal);

    if true_range > model.max_range {
        return Ok(None);
    }

    let biased = true_range * (1.0 + model.range_bias);
    let range = if u_outlier < model.outlier_probability {
        let (lo, hi) = model.outlier_offset_range;
        biased + lo + (hi - lo) * u_offset
    } else {
        biased + model.sigma_dist * z_range
    };
    let bearing = d.y.atan2(d.x) - observer.theta + model.sigma_angle * z_bearing;

    Ok(Some(Observation {
        observer: observer_id,
        target: target_id,
        range: range.max(RANGE_FLOOR),
        bearing: model.quantize(bearing),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn magnitude_to_range_examples() {
        let unit = PowerLawCalibration::new(1.0, -2.0, 0.0).unwrap();
        assert_eq!(magnitude_to_range(&unit, 1.0).unwrap(), 1.0);
        let c = PowerLawCalibration::new(100.0, -2.0, 0.0).unwrap();
        assert_abs_diff_eq!(magnitude_to_range(&c, 2.0).unwrap(), 25.0, epsilon = 1e-12);
        // 50 * 3^-1.8, evaluated with 30-digit arithmetic
        let c = PowerLawCalibration::new(50.0, -1.8, 0.0).unwrap();
        assert_abs_diff_eq!(
            magnitude_to_range(&c, 3.0).unwrap(),
            6.92072744230843,
            epsilon = 1e-9
        );
        assert!(magnitude_to_range(&c, 0.0).is_err());
        assert!(magnitude_to_range(&c, -1.0).is_err());
    }

    #[test]
    fn calibration_invariants() {
        assert!(PowerLawCalibration::new(0.0, -2.0, 0.0).is_err());
        assert!(PowerLawCalibration::new(1.0, 0.0, 0.0).is_err());
        assert!(PowerLawCalibration::new(1.0, 0.5, 0.0).is_err());
    }

    fn exact_samples(a: f64, b: f64) -> Vec<(f64, f64)> {
        let cal = PowerLawCalibration::new(a, b, 0.0).unwrap();
        (0..=16)
            .map(|i| {
                let d = 20.0 + 5.0 * i as f64;
                (d, cal.range_to_magnitude(d))
            })
            .collect()
    }

    #[test]
    fn exact_fit_recovers_generator() {
        let fit = fit_power_law(&exact_samples(80.0, -2.0), 10.0).unwrap();
        assert_abs_diff_eq!(fit.calibration.exponent, -2.0, epsilon = 1e-9);
        assert!((fit.calibration.amplitude / 80.0 - 1.0).abs() < 1e-6);
        assert_eq!(fit.n_samples_used, 17);
        assert!(fit.rms_log_residual < 1e-12);
    }

    #[test]
    fn saturated_samples_are_ignored() {
        let clean = exact_samples(80.0, -2.0);
        let mut dirty = clean.clone();
        dirty.push((3.0, 0.01));
        dirty.push((8.0, 1e6));
        dirty.push((10.0, 42.0));
        let a = fit_power_law(&clean, 10.0).unwrap();
        let b = fit_power_law(&dirty, 10.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_samples() {
        let s = exact_samples(80.0, -2.0);
        assert!(matches!(
            fit_power_law(&s[..2], 0.0),
            Err(Error::Calibration(_))
        ));
        // enough rows, but only two beyond saturation
        assert!(matches!(
            fit_power_law(&s, 94.0),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn constant_magnitude_is_rejected() {
        let s = vec![(20.0, 1.0), (30.0, 1.0), (40.0, 1.0)];
        assert!(matches!(fit_power_law(&s, 0.0), Err(Error::Calibration(_))));
    }

    #[test]
    fn csv_reader() {
        let text = "range_cm,magnitude\n20, 2.0\n30,1.5\n";
        let s = read_calibration_csv(text.as_bytes()).unwrap();
        assert_eq!(s, vec![(20.0, 2.0), (30.0, 1.5)]);
        assert!(read_calibration_csv("20,2.0\n30,1.5\n".as_bytes()).is_err());
        let err = read_calibration_csv("range_cm,magnitude\n20,abc\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn sense_noise_free_geometry() {
        let m = SensorNoiseModel::noise_free(100.0);
        let o = sense(
            0,
            &Pose2D::origin(),
            1,
            &Pose2D::new(50.0, 0.0, 0.0),
            &m,
            &mut rng(),
        )
        .unwrap()
        .unwrap();
        assert_eq!(o.range, 50.0);
        assert_eq!(o.bearing, 0.0);

        let o = sense(
            0,
            &Pose2D::new(0.0, 0.0, FRAC_PI_2),
            1,
            &Pose2D::new(0.0, 50.0, 0.0),
            &m,
            &mut rng(),
        )
        .unwrap()
        .unwrap();
        assert_abs_diff_eq!(o.range, 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o.bearing, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn sense_out_of_range_and_degenerate() {
        let m = SensorNoiseModel::noise_free(100.0);
        let far = sense(
            0,
            &Pose2D::origin(),
            1,
            &Pose2D::new(200.0, 0.0, 0.0),
            &m,
            &mut rng(),
        );
        assert!(far.unwrap().is_none());
        assert!(sense(0, &Pose2D::origin(), 1, &Pose2D::origin(), &m, &mut rng()).is_err());
    }

    #[test]
    fn sensed_range_spread_matches_sigma() {
        let m = SensorNoiseModel {
            angular_resolution: 0.0,
            ..SensorNoiseModel::default()
        };
        let mut r = rng();
        let target = Pose2D::new(61.0, 0.0, 0.0);
        let ranges: Vec<f64> = (0..10_000)
            .map(|_| {
                sense(0, &Pose2D::origin(), 1, &target, &m, &mut r)
                    .unwrap()
                    .unwrap()
                    .range
            })
            .collect();
        let mean = ranges.iter().sum::<f64>() / ranges.len() as f64;
        let var =
            ranges.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (ranges.len() - 1) as f64;
        assert!((var.sqrt() / 15.0 - 1.0).abs() < 0.05, "std {}", var.sqrt());
        assert!((mean - 61.0).abs() < 1.0);
    }

    #[test]
    fn outliers_are_one_sided() {
        let m = SensorNoiseModel {
            sigma_dist: 0.0,
            outlier_probability: 0.5,
            outlier_offset_range: (30.0, 60.0),
            ..SensorNoiseModel::default()
        };
        let mut r = rng();
        let target = Pose2D::new(61.0, 0.0, 0.0);
        let mut n_out = 0;
        for _ in 0..2000 {
            let o = sense(0, &Pose2D::origin(), 1, &target, &m, &mut r)
                .unwrap()
                .unwrap();
            if o.range > 61.0 {
                assert!((91.0..=121.0).contains(&o.range));
                n_out += 1;
            } else {
                assert_eq!(o.range, 61.0);
            }
        }
        assert!((800..1200).contains(&n_out));
    }

    #[test]
    fn bearing_is_quantized() {
        let m = SensorNoiseModel {
            sigma_angle: 0.0,
            sigma_dist: 0.0,
            ..SensorNoiseModel::default()
        };
        let res = m.angular_resolution;
        let target = Pose2D::new(50.0, 17.0, 0.0);
        let o = sense(0, &Pose2D::origin(), 1, &target, &m, &mut rng())
            .unwrap()
            .unwrap();
        let k = o.bearing / res;
        assert_abs_diff_eq!(k, k.round(), epsilon = 1e-9);
        assert!((o.bearing - 17f64.atan2(50.0)).abs() <= 0.5 * res + 1e-12);
    }

    #[test]
    fn sensor_model_json_defaults() {
        let m: SensorNoiseModel =
            serde_json::from_str(r#"{"sigma_dist": 15, "sigma_angle": 0.15, "max_range": 100}"#)
                .unwrap();
        assert_eq!(m.outlier_probability, 0.0);
        assert_eq!(m.range_bias, 0.0);
        m.validate().unwrap();
        let bad = SensorNoiseModel {
            outlier_probability: 1.0,
            ..m
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn range_decreases_with_magnitude(a in 1.0f64..500.0, b in -4.0f64..-0.2, m in 0.01f64..100.0, dm in 1e-3f64..10.0) {
            let cal = PowerLawCalibration::new(a, b, 0.0).unwrap();
            prop_assert!(magnitude_to_range(&cal, m + dm).unwrap() < magnitude_to_range(&cal, m).unwrap());
        }

        #[test]
        fn fit_round_trips_noise_free(a in 5.0f64..500.0, b in -3.5f64..-0.5) {
            let samples = exact_samples(a, b);
            let fit = fit_power_law(&samples, 0.0).unwrap();
            for &(d, m) in &samples {
                let back = magnitude_to_range(&fit.calibration, m).unwrap();
                prop_assert!((back / d - 1.0).abs() < 1e-9);
            }
        }
    }
}

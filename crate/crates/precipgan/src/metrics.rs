//! Forecast verification metrics.
//!
//! Zonal (East–West) power spectra, logarithmically spaced extreme
//! percentiles with variability bands, fractional contribution of binned
//! rain rates, latitude-weighted anomaly correlation, and the Gaussian-blur
//! ablation that trades ACC against extremes.
//!
//! All functions are pure; reductions use compensated summation where the
//! result is asserted to be order-insensitive.

use ndarray::Array2;
use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::grid::{GridField, Units};
use crate::kahan;

/// Percentile levels log-spaced toward 100 in `100 - p`.
pub const DEFAULT_PERCENTILE_LEVELS: [f64; 5] = [90.0, 99.0, 99.9, 99.99, 99.999];

/// Zonal power spectrum averaged over latitude rows and fields.
///
/// `power[k]` holds the folded spectral power at integer wavenumber `k`
/// (cycles per longitude circle), `k = 0 ..= nlon/2`, normalized so that
/// `sum_k power[k]` equals the mean square of the field row (Parseval).
#[derive(Debug, Clone)]
pub struct SpectrumResult {
    pub wavenumbers: Vec<usize>,
    pub power: Vec<f64>,
}

/// Extreme percentiles averaged over fields, with the min/max envelope
/// over fields as a variability band.
#[derive(Debug, Clone)]
pub struct PercentileTable {
    pub levels: Vec<f64>,
    pub values: Vec<f64>,
    pub band_low: Vec<f64>,
    pub band_high: Vec<f64>,
}

impl PercentileTable {
    pub fn value_at(&self, level: f64) -> Option<f64> {
        self.levels
            .iter()
            .position(|&l| l == level)
            .map(|i| self.values[i])
    }
}

/// Share of total accumulated precipitation delivered by each rain-rate bin.
#[derive(Debug, Clone)]
pub struct FracContribution {
    pub bin_edges: Vec<f64>,
    pub fractions: Vec<f64>,
    /// Share from values in `(0, bin_edges[0])`.
    pub below_range: f64,
    /// Share from values `>= bin_edges[last]`.
    pub above_range: f64,
}

/// Computes the zonal power spectrum of a set of fields on a common grid.
///
/// Each latitude row is Fourier-transformed along longitude (periodic, no
/// window); squared magnitudes are folded onto non-negative wavenumbers and
/// averaged with equal weight over rows and fields.
pub fn zonal_power_spectrum(fields: &[GridField]) -> Result<SpectrumResult> {
    let first = fields
        .first()
        .ok_or_else(|| Error::Metric("zonal_power_spectrum: empty field list".into()))?;
    let (nlat, nlon) = first.geometry.shape();
    if nlon % 2 != 0 {
        return Err(Error::Metric(format!(
            "zonal_power_spectrum requires even nlon, got {nlon}"
        )));
    }
    for f in fields {
        if f.geometry.shape() != (nlat, nlon) || f.units != first.units {
            return Err(Error::ShapeMismatch(
                "fields must share geometry and units".into(),
            ));
        }
    }
    let half = nlon / 2;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nlon);
    let mut accum = vec![kahan::Accumulator::new(); half + 1];
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); nlon];
    let norm = 1.0 / (nlon as f64 * nlon as f64);
    for field in fields {
        for row in field.values.outer_iter() {
            for (b, &v) in buf.iter_mut().zip(row.iter()) {
                *b = Complex::new(v, 0.0);
            }
            fft.process(&mut buf);
            accum[0].add(buf[0].norm_sqr() * norm);
            for k in 1..half {
                accum[k].add(2.0 * buf[k].norm_sqr() * norm);
            }
            accum[half].add(buf[half].norm_sqr() * norm);
        }
    }
    let count = (fields.len() * nlat) as f64;
    let power: Vec<f64> = accum.iter().map(|a| a.total() / count).collect();
    Ok(SpectrumResult {
        wavenumbers: (0..=half).collect(),
        power,
    })
}

/// Mean absolute difference of `ln(power)` between two spectra over
/// wavenumbers `from_index ..`. Used to score how well a model matches a
/// reference spectrum at fine scales.
pub fn log_power_mae(a: &SpectrumResult, b: &SpectrumResult, from_index: usize) -> Result<f64> {
    if a.power.len() != b.power.len() {
        return Err(Error::ShapeMismatch("spectra have different lengths".into()));
    }
    if from_index >= a.power.len() {
        return Err(Error::Metric("from_index beyond spectrum length".into()));
    }
    let mut acc = kahan::Accumulator::new();
    let mut n = 0usize;
    for k in from_index..a.power.len() {
        let (pa, pb) = (a.power[k], b.power[k]);
        if pa <= 0.0 || pb <= 0.0 {
            return Err(Error::Metric(format!(
                "nonpositive power at wavenumber {k}; log-power error undefined"
            )));
        }
        acc.add((pa.ln() - pb.ln()).abs());
        n += 1;
    }
    Ok(acc.total() / n as f64)
}

/// Ordinary least-squares slope of `ln(power)` against `ln(k)` over
/// wavenumbers `k_min ..= k_max`.
pub fn fit_loglog_slope(spectrum: &SpectrumResult, k_min: usize, k_max: usize) -> Result<f64> {
    if k_min == 0 || k_max <= k_min || k_max >= spectrum.power.len() {
        return Err(Error::Metric(format!(
            "invalid fit range [{k_min}, {k_max}] for spectrum of length {}",
            spectrum.power.len()
        )));
    }
    let pts: Vec<(f64, f64)> = (k_min..=k_max)
        .map(|k| {
            let p = spectrum.power[k];
            if p <= 0.0 {
                return Err(Error::Metric(format!("nonpositive power at wavenumber {k}")));
            }
            Ok(((k as f64).ln(), p.ln()))
        })
        .collect::<Result<_>>()?;
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(sxy / sxx)
}

/// Quantile of sorted data with linear interpolation between order
/// statistics (`h = (n-1) p/100`), the convention matched by the full-sort
/// oracle in the tests.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Per-field global quantiles, averaged over fields, with the min/max
/// envelope over fields as the variability band.
pub fn extreme_percentiles(fields: &[GridField], levels: &[f64]) -> Result<PercentileTable> {
    if fields.is_empty() {
        return Err(Error::Metric("extreme_percentiles: empty field list".into()));
    }
    if levels.is_empty() {
        return Err(Error::Metric("extreme_percentiles: no levels given".into()));
    }
    for w in levels.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Metric("levels must be strictly increasing".into()));
        }
    }
    if levels.iter().any(|&p| p <= 0.0 || p >= 100.0) {
        return Err(Error::Metric("levels must lie in (0, 100)".into()));
    }
    let mut values = vec![kahan::Accumulator::new(); levels.len()];
    let mut band_low = vec![f64::INFINITY; levels.len()];
    let mut band_high = vec![f64::NEG_INFINITY; levels.len()];
    for field in fields {
        let mut sorted: Vec<f64> = field.values.iter().cloned().collect();
        sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        for (i, &p) in levels.iter().enumerate() {
            let q = quantile_sorted(&sorted, p);
            values[i].add(q);
            band_low[i] = band_low[i].min(q);
            band_high[i] = band_high[i].max(q);
        }
    }
    let n = fields.len() as f64;
    Ok(PercentileTable {
        levels: levels.to_vec(),
        values: values.iter().map(|a| a.total() / n).collect(),
        band_low,
        band_high,
    })
}

/// Per-field quantile at a single level (same convention as
/// [`extreme_percentiles`]).
pub fn field_percentile(field: &GridField, level: f64) -> f64 {
    let mut sorted: Vec<f64> = field.values.iter().cloned().collect();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&sorted, level)
}

/// Log-spaced rain-rate bin edges from 0.05 to 100 mm/6hr (25 edges,
/// 24 bins).
pub fn default_rain_rate_bins() -> Vec<f64> {
    let (lo, hi, n) = (0.05f64, 100.0f64, 25usize);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Fractional contribution of binned rain rates to total precipitation,
/// pooled over fields.
///
/// `fractions[b]` is the share of total accumulated precipitation from
/// gridpoints with rate in `[edges[b], edges[b+1])`; mass below the first
/// edge and at/above the last edge is reported separately so conservation
/// (`sum + below + above = 1`) is checkable. Dry gridpoints carry zero mass
/// and affect nothing.
pub fn fractional_contribution(
    fields: &[GridField],
    bin_edges: &[f64],
) -> Result<FracContribution> {
    if fields.is_empty() {
        return Err(Error::Metric("fractional_contribution: empty field list".into()));
    }
    if bin_edges.len() < 2 {
        return Err(Error::Metric("need at least two bin edges".into()));
    }
    if bin_edges[0] <= 0.0 {
        return Err(Error::Metric("bin edges must be positive".into()));
    }
    for w in bin_edges.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::Metric("bin edges must be strictly increasing".into()));
        }
    }
    for f in fields {
        if f.units != Units::MmPer6hr {
            return Err(Error::Metric(
                "fractional_contribution expects physical (mm_per_6hr) fields".into(),
            ));
        }
    }
    let nbins = bin_edges.len() - 1;
    let mut mass = vec![kahan::Accumulator::new(); nbins];
    let mut below = kahan::Accumulator::new();
    let mut above = kahan::Accumulator::new();
    let mut total = kahan::Accumulator::new();
    for field in fields {
        for &v in field.values.iter() {
            total.add(v);
            if v <= 0.0 {
                continue;
            }
            if v < bin_edges[0] {
                below.add(v);
            } else if v >= bin_edges[nbins] {
                above.add(v);
            } else {
                // Binary search for the bin with edges[b] <= v < edges[b+1].
                let b = match bin_edges.binary_search_by(|e| e.partial_cmp(&v).unwrap()) {
                    Ok(i) => i,
                    Err(i) => i - 1,
                };
                mass[b].add(v);
            }
        }
    }
    let total = total.total();
    if total <= 0.0 {
        return Err(Error::Metric(
            "total precipitation is zero; fractions undefined".into(),
        ));
    }
    Ok(FracContribution {
        bin_edges: bin_edges.to_vec(),
        fractions: mass.iter().map(|m| m.total() / total).collect(),
        below_range: below.total() / total,
        above_range: above.total() / total,
    })
}

/// Latitude-weighted (cos-latitude) centered anomaly correlation.
///
/// Anomalies are taken relative to `climatology`; both anomaly fields are
/// centered by their weighted means before correlating. Returns `None` when
/// either anomaly field has zero weighted variance (the correlation is
/// undefined there; no NaN is produced).
pub fn acc(
    forecast: &GridField,
    truth: &GridField,
    climatology: &GridField,
) -> Result<Option<f64>> {
    let shape = forecast.geometry.shape();
    if truth.geometry.shape() != shape || climatology.geometry.shape() != shape {
        return Err(Error::ShapeMismatch("acc: fields must share geometry".into()));
    }
    if forecast.units != truth.units || forecast.units != climatology.units {
        return Err(Error::Metric("acc: fields must share units".into()));
    }
    let (nlat, nlon) = shape;
    let weights: Vec<f64> = forecast
        .geometry
        .lat_centers
        .iter()
        .map(|&lat| (lat * std::f64::consts::PI / 180.0).cos())
        .collect();

    let weighted_mean = |x: &Array2<f64>| -> f64 {
        let mut num = kahan::Accumulator::new();
        let mut den = kahan::Accumulator::new();
        for i in 0..nlat {
            let w = weights[i];
            for j in 0..nlon {
                num.add(w * x[[i, j]]);
                den.add(w);
            }
        }
        num.total() / den.total()
    };

    let fa = &forecast.values - &climatology.values;
    let ta = &truth.values - &climatology.values;
    let fm = weighted_mean(&fa);
    let tm = weighted_mean(&ta);

    let mut num = kahan::Accumulator::new();
    let mut var_f = kahan::Accumulator::new();
    let mut var_t = kahan::Accumulator::new();
    for i in 0..nlat {
        let w = weights[i];
        for j in 0..nlon {
            let a = fa[[i, j]] - fm;
            let b = ta[[i, j]] - tm;
            num.add(w * a * b);
            var_f.add(w * a * a);
            var_t.add(w * b * b);
        }
    }
    let (num, var_f, var_t) = (num.total(), var_f.total(), var_t.total());
    if var_f <= 0.0 || var_t <= 0.0 {
        return Ok(None);
    }
    // Perfectly (anti-)correlated anomalies return exactly +/-1.
    if var_f == var_t {
        if num == var_f {
            return Ok(Some(1.0));
        }
        if num == -var_f {
            return Ok(Some(-1.0));
        }
    }
    let r = num / (var_f.sqrt() * var_t.sqrt());
    Ok(Some(r.clamp(-1.0, 1.0)))
}

/// Normalized 1D Gaussian kernel truncated at `4 sigma`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).floor() as usize;
    let mut kernel: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-0.5 * (x / sigma) * (x / sigma)).exp()
        })
        .collect();
    let total: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }
    kernel
}

/// Separable Gaussian blur on raw values: periodic wrap along longitude
/// (second axis), edge clamp along latitude (first axis).
pub fn blur_array(values: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let (nlat, nlon) = values.dim();

    // Longitude pass, periodic (the kernel may be wider than the grid).
    let mut pass1 = Array2::zeros((nlat, nlon));
    for i in 0..nlat {
        for j in 0..nlon {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let jj = (j as isize + t as isize - radius as isize)
                    .rem_euclid(nlon as isize) as usize;
                acc += k * values[[i, jj]];
            }
            pass1[[i, j]] = acc;
        }
    }
    // Latitude pass, clamped.
    let mut out = Array2::zeros((nlat, nlon));
    for i in 0..nlat {
        for j in 0..nlon {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let ii = (i + t).saturating_sub(radius).min(nlat - 1);
                acc += k * pass1[[ii, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Gaussian blur of a field (see [`blur_array`] for boundary handling).
pub fn gaussian_blur(field: &GridField, sigma: f64) -> Result<GridField> {
    if !(sigma > 0.0) {
        return Err(Error::Metric(format!("blur sigma must be positive, got {sigma}")));
    }
    Ok(GridField {
        geometry: field.geometry.clone(),
        values: blur_array(&field.values, sigma),
        units: field.units,
    })
}

/// Paired ACC / extreme-percentile comparison between raw and blurred
/// forecasts at a fixed blur strength.
#[derive(Debug, Clone)]
pub struct BlurAblationReport {
    pub sigma: f64,
    pub num_samples: usize,
    /// Number of samples where ACC was defined for both raw and blurred.
    pub acc_defined: usize,
    pub acc_raw_mean: f64,
    pub acc_blurred_mean: f64,
    pub percentiles_raw: PercentileTable,
    pub percentiles_blurred: PercentileTable,
}

/// Recomputes ACC and extreme percentiles on raw vs blurred forecasts.
pub fn blur_ablation(
    forecasts: &[GridField],
    truths: &[GridField],
    climatology: &GridField,
    sigma: f64,
    levels: &[f64],
) -> Result<BlurAblationReport> {
    if forecasts.len() != truths.len() || forecasts.is_empty() {
        return Err(Error::Metric(
            "blur_ablation: forecasts and truths must be nonempty and paired".into(),
        ));
    }
    let blurred: Vec<GridField> = forecasts
        .iter()
        .map(|f| gaussian_blur(f, sigma))
        .collect::<Result<_>>()?;

    let mut raw_acc = kahan::Accumulator::new();
    let mut blur_acc = kahan::Accumulator::new();
    let mut defined = 0usize;
    for ((f, b), t) in forecasts.iter().zip(&blurred).zip(truths) {
        let ar = acc(f, t, climatology)?;
        let ab = acc(b, t, climatology)?;
        if let (Some(ar), Some(ab)) = (ar, ab) {
            raw_acc.add(ar);
            blur_acc.add(ab);
            defined += 1;
        }
    }
    if defined == 0 {
        return Err(Error::Metric("blur_ablation: ACC undefined on every sample".into()));
    }
    Ok(BlurAblationReport {
        sigma,
        num_samples: forecasts.len(),
        acc_defined: defined,
        acc_raw_mean: raw_acc.total() / defined as f64,
        acc_blurred_mean: blur_acc.total() / defined as f64,
        percentiles_raw: extreme_percentiles(forecasts, levels)?,
        percentiles_blurred: extreme_percentiles(&blurred, levels)?,
    })
}

//! Grid geometry, field containers and the precipitation transform.
//!
//! All gridded data in this crate lives on a regular latitude–longitude
//! grid: rows are latitude cell centers in descending order (north first),
//! columns are equispaced longitudes covering the full circle. Precipitation
//! fields carry explicit units so the invertible log transform cannot be
//! applied twice or inverted from the wrong space.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default `eps` (mm/6hr) for [`tp_transform`] / [`tp_inverse`].
pub const DEFAULT_TP_EPS: f64 = 1e-4;

/// Name of the constant latitude channel inside a [`ConditioningStack`].
pub const LATITUDE_CHANNEL: &str = "latitude_embedding";

/// Units of a [`GridField`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    /// Physical 6-hour accumulated precipitation, mm per 6 hr. Non-negative.
    MmPer6hr,
    /// `ln(1 + tp/eps)` space. Non-negative for physical inputs.
    LogNormalized,
    Dimensionless,
}

impl Units {
    pub fn as_str(&self) -> &'static str {
        match self {
            Units::MmPer6hr => "mm_per_6hr",
            Units::LogNormalized => "log_normalized",
            Units::Dimensionless => "dimensionless",
        }
    }

    pub fn parse(s: &str) -> Result<Units> {
        match s {
            "mm_per_6hr" => Ok(Units::MmPer6hr),
            "log_normalized" => Ok(Units::LogNormalized),
            "dimensionless" => Ok(Units::Dimensionless),
            other => Err(Error::Field(format!("unknown units `{other}`"))),
        }
    }
}

/// Regular lat–lon grid geometry.
///
/// Latitude centers are strictly descending in `[-90, 90]`; longitude
/// centers are ascending, equispaced with spacing exactly `360/nlon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub nlat: usize,
    pub nlon: usize,
    pub lat_centers: Vec<f64>,
    pub lon_centers: Vec<f64>,
}

impl GridGeometry {
    /// Cell-centered global grid: row `i` at `90 - (i + 0.5) * 180/nlat`
    /// degrees, column `j` at `j * 360/nlon` degrees.
    pub fn global(nlat: usize, nlon: usize) -> Result<GridGeometry> {
        if nlat < 2 || nlon < 2 {
            return Err(Error::Geometry(format!(
                "grid must be at least 2x2, got {nlat}x{nlon}"
            )));
        }
        let dlat = 180.0 / nlat as f64;
        let dlon = 360.0 / nlon as f64;
        let lat_centers = (0..nlat).map(|i| 90.0 - (i as f64 + 0.5) * dlat).collect();
        let lon_centers = (0..nlon).map(|j| j as f64 * dlon).collect();
        GridGeometry::new(nlat, nlon, lat_centers, lon_centers)
    }

    pub fn new(
        nlat: usize,
        nlon: usize,
        lat_centers: Vec<f64>,
        lon_centers: Vec<f64>,
    ) -> Result<GridGeometry> {
        if lat_centers.len() != nlat || lon_centers.len() != nlon {
            return Err(Error::Geometry(format!(
                "coordinate lengths ({}, {}) do not match grid dims ({nlat}, {nlon})",
                lat_centers.len(),
                lon_centers.len()
            )));
        }
        if !lat_centers.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::Geometry("latitudes must be strictly descending".into()));
        }
        if lat_centers.iter().any(|&v| !(-90.0..=90.0).contains(&v)) {
            return Err(Error::Geometry("latitudes must lie in [-90, 90]".into()));
        }
        let dlon = 360.0 / nlon as f64;
        for (j, &lon) in lon_centers.iter().enumerate() {
            if !(0.0..360.0).contains(&lon) {
                return Err(Error::Geometry(format!("longitude {lon} outside [0, 360)")));
            }
            let expected = lon_centers[0] + j as f64 * dlon;
            if (lon - expected).abs() > 1e-9 {
                return Err(Error::Geometry(format!(
                    "longitudes must be equispaced with spacing 360/nlon = {dlon}"
                )));
            }
        }
        Ok(GridGeometry {
            nlat,
            nlon,
            lat_centers,
            lon_centers,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nlat, self.nlon)
    }
}

/// Single-channel 2D field with geometry and units.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub geometry: GridGeometry,
    pub values: Array2<f64>,
    pub units: Units,
}

impl GridField {
    /// Validates shape, finiteness and (for physical precipitation)
    /// non-negativity.
    pub fn new(geometry: GridGeometry, values: Array2<f64>, units: Units) -> Result<GridField> {
        if values.dim() != (geometry.nlat, geometry.nlon) {
            return Err(Error::Field(format!(
                "values shape {:?} does not match geometry ({}, {})",
                values.dim(),
                geometry.nlat,
                geometry.nlon
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Field("non-finite value in field".into()));
        }
        if units == Units::MmPer6hr && values.iter().any(|&v| v < 0.0) {
            return Err(Error::Field(
                "negative value in mm_per_6hr precipitation field".into(),
            ));
        }
        Ok(GridField {
            geometry,
            values,
            units,
        })
    }

    pub fn zeros(geometry: GridGeometry, units: Units) -> GridField {
        let values = Array2::zeros((geometry.nlat, geometry.nlon));
        GridField {
            geometry,
            values,
            units,
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Multi-channel conditioning input: prognostic channels plus exactly one
/// constant latitude channel named [`LATITUDE_CHANNEL`].
#[derive(Debug, Clone)]
pub struct ConditioningStack {
    pub geometry: GridGeometry,
    /// Shape `(C, nlat, nlon)`.
    pub channels: Array3<f64>,
    pub channel_names: Vec<String>,
}

impl ConditioningStack {
    pub fn new(
        geometry: GridGeometry,
        channels: Array3<f64>,
        channel_names: Vec<String>,
    ) -> Result<ConditioningStack> {
        let (c, h, w) = channels.dim();
        if (h, w) != (geometry.nlat, geometry.nlon) {
            return Err(Error::ShapeMismatch(format!(
                "channel grid ({h}, {w}) does not match geometry ({}, {})",
                geometry.nlat, geometry.nlon
            )));
        }
        if channel_names.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "{} channel names for {c} channels",
                channel_names.len()
            )));
        }
        if c < 2 {
            return Err(Error::Field("conditioning stack needs at least 2 channels".into()));
        }
        let lat_count = channel_names
            .iter()
            .filter(|n| n.as_str() == LATITUDE_CHANNEL)
            .count();
        if lat_count != 1 {
            return Err(Error::Field(format!(
                "expected exactly one `{LATITUDE_CHANNEL}` channel, found {lat_count}"
            )));
        }
        if channels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Field("non-finite value in conditioning stack".into()));
        }
        // The latitude channel must be constant along longitude.
        let lat_idx = channel_names
            .iter()
            .position(|n| n == LATITUDE_CHANNEL)
            .unwrap();
        for i in 0..h {
            let row = channels.slice(ndarray::s![lat_idx, i, ..]);
            let first = row[0];
            if row.iter().any(|&v| v != first) {
                return Err(Error::Field(format!(
                    "latitude channel is not constant along longitude at row {i}"
                )));
            }
        }
        Ok(ConditioningStack {
            geometry,
            channels,
            channel_names,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.dim().0
    }
}

/// Constant latitude channel: row `i` filled with `sin(lat_i * pi/180)`.
///
/// Bounded, smooth and pole-symmetric; constant along longitude.
pub fn make_latitude_channel(geometry: &GridGeometry) -> Array2<f64> {
    let mut out = Array2::zeros((geometry.nlat, geometry.nlon));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let v = (geometry.lat_centers[i] * std::f64::consts::PI / 180.0).sin();
        row.fill(v);
    }
    out
}

/// Invertible precipitation transform `tp -> ln(1 + tp/eps)`.
///
/// Maps 0 to 0, is strictly monotone and compresses the heavy tail.
pub fn tp_transform(field: &GridField, eps: f64) -> Result<GridField> {
    if field.units != Units::MmPer6hr {
        return Err(Error::Field(format!(
            "tp_transform expects mm_per_6hr input, got {:?}",
            field.units
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Field(format!("eps must be positive, got {eps}")));
    }
    if field.values.iter().any(|&v| v < 0.0) {
        return Err(Error::Field("negative precipitation value".into()));
    }
    let values = field.values.mapv(|v| (v / eps).ln_1p());
    Ok(GridField {
        geometry: field.geometry.clone(),
        values,
        units: Units::LogNormalized,
    })
}

/// Inverse of [`tp_transform`]: `x -> eps * (exp(x) - 1)`.
pub fn tp_inverse(field: &GridField, eps: f64) -> Result<GridField> {
    if field.units != Units::LogNormalized {
        return Err(Error::Field(format!(
            "tp_inverse expects log_normalized input, got {:?}",
            field.units
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Field(format!("eps must be positive, got {eps}")));
    }
    if field.values.iter().any(|&v| v < 0.0) {
        return Err(Error::Field("negative log-normalized value".into()));
    }
    let values = field.values.mapv(|v| eps * v.exp_m1());
    Ok(GridField {
        geometry: field.geometry.clone(),
        values,
        units: Units::MmPer6hr,
    })
}

/// Raw log-space array version of [`tp_inverse`], used where fields have
/// already been validated (e.g. generator output post-processing).
pub fn tp_inverse_values(values: &Array2<f64>, eps: f64) -> Array2<f64> {
    values.mapv(|v| eps * v.exp_m1())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn latitude_channel_rows() {
        // 4x8: rows constant along longitude, values sin(lat).
        let geom = GridGeometry::global(4, 8).unwrap();
        let lat = make_latitude_channel(&geom);
        assert_eq!(lat.dim(), (4, 8));
        for (i, row) in lat.outer_iter().enumerate() {
            let expected = (geom.lat_centers[i] * std::f64::consts::PI / 180.0).sin();
            assert!(row.iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn latitude_channel_poles_and_equator() {
        // Explicit geometry with rows at 90, 0, -45 degrees.
        let geom = GridGeometry::new(3, 4, vec![90.0, 0.0, -45.0], vec![0.0, 90.0, 180.0, 270.0])
            .unwrap();
        let lat = make_latitude_channel(&geom);
        assert_abs_diff_eq!(lat[[0, 0]], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lat[[1, 2]], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lat[[2, 3]], -(0.5f64.sqrt()), epsilon = 1e-15);
    }

    #[test]
    fn latitude_channel_longitude_invariant() {
        let geom = GridGeometry::global(16, 32).unwrap();
        let lat = make_latitude_channel(&geom);
        let max_span = lat
            .outer_iter()
            .map(|row| {
                let mn = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx - mn
            })
            .fold(0.0, f64::max);
        assert_eq!(max_span, 0.0);
    }

    #[test]
    fn tp_transform_values() {
        let geom = GridGeometry::global(2, 4).unwrap();
        let eps = 1e-4;
        let mut values = Array2::zeros((2, 4));
        values[[0, 0]] = 0.0;
        values[[0, 1]] = eps;
        let f = GridField::new(geom, values, Units::MmPer6hr).unwrap();
        let t = tp_transform(&f, eps).unwrap();
        assert_eq!(t.units, Units::LogNormalized);
        assert_eq!(t.values[[0, 0]], 0.0);
        assert_abs_diff_eq!(t.values[[0, 1]], 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn tp_inverse_values_check() {
        let geom = GridGeometry::global(2, 4).unwrap();
        let eps = 1e-4;
        let mut values = Array2::zeros((2, 4));
        values[[1, 3]] = 2f64.ln();
        let f = GridField::new(geom, values, Units::LogNormalized).unwrap();
        let inv = tp_inverse(&f, eps).unwrap();
        assert_eq!(inv.units, Units::MmPer6hr);
        assert_eq!(inv.values[[0, 0]], 0.0);
        assert_abs_diff_eq!(inv.values[[1, 3]], eps, epsilon = 1e-18);
    }

    #[test]
    fn tp_transform_rejects_negative() {
        let geom = GridGeometry::global(2, 4).unwrap();
        let mut values = Array2::zeros((2, 4));
        values[[0, 0]] = 1.0;
        let mut f = GridField::new(geom, values, Units::MmPer6hr).unwrap();
        f.values[[0, 0]] = -1.0;
        assert!(tp_transform(&f, 1e-4).is_err());
    }

    #[test]
    fn conditioning_stack_requires_latitude_channel() {
        let geom = GridGeometry::global(4, 8).unwrap();
        let channels = Array3::zeros((2, 4, 8));
        let err = ConditioningStack::new(
            geom,
            channels,
            vec!["a".to_string(), "b".to_string()],
        );
        assert!(err.is_err());
    }

    #[test]
    fn geometry_rejects_unequal_spacing() {
        assert!(GridGeometry::new(2, 3, vec![30.0, -30.0], vec![0.0, 100.0, 240.0]).is_err());
    }

    proptest! {
        // tp_inverse(tp_transform(x)) = x to 1e-10 relative, against the
        // direct algebraic inverse.
        #[test]
        fn transform_round_trip(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let geom = GridGeometry::global(8, 16).unwrap();
            let values = Array2::from_shape_fn((8, 16), |_| {
                // Heavy-tailed non-negative values spanning many decades.
                let u: f64 = rng.gen_range(-8.0..4.0);
                if rng.gen_bool(0.3) { 0.0 } else { 10f64.powf(u) }
            });
            let f = GridField::new(geom, values, Units::MmPer6hr).unwrap();
            let rt = tp_inverse(&tp_transform(&f, DEFAULT_TP_EPS).unwrap(), DEFAULT_TP_EPS).unwrap();
            for (a, b) in f.values.iter().zip(rt.values.iter()) {
                let denom = a.abs().max(1e-300);
                prop_assert!((a - b).abs() / denom <= 1e-10 || (a - b).abs() <= 1e-14);
            }
        }
    }
}

//! Dataset containers and sample sources.
//!
//! Two on-disk forms feed the pipeline:
//!
//! - a **NetCDF-3 container** (classic format, 64-bit offsets) holding
//!   `tp(time, lat, lon)` in mm/6hr plus `channels(time, channel, lat, lon)`
//!   and coordinate vectors — the ingestion contract for externally
//!   produced gridded datasets, also written by `gen-data`;
//! - a **synthetic corpus descriptor** (JSON) naming a grid, synthesis
//!   parameters and a sample count; samples are materialized lazily and
//!   reproducibly from `(rng_seed, index)`, so corpora of tens of
//!   thousands of samples never touch disk.
//!
//! Container schema (exact names):
//! dimensions `time` (unlimited), `channel`, `lat`, `lon`; variables
//! `lat(lat)`, `lon(lon)`, `tp(time, lat, lon)` with attribute
//! `units = "mm_per_6hr"`, `channels(time, channel, lat, lon)`; global
//! attribute `channel_names` (semicolon-separated, length `channel`).

use ndarray::{Array2, Array3};
use netcdf3::{DataSet, FileReader, FileWriter, Version};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{
    make_latitude_channel, ConditioningStack, GridField, GridGeometry, Units, LATITUDE_CHANNEL,
};
use crate::synth::{dataset_split, synth_sample, SynthParams};

/// Train/val/test index ranges (contiguous, disjoint, exhaustive).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn from_fractions(num_samples: usize, fractions: (f64, f64, f64)) -> Result<Splits> {
        let (train, val, test) = dataset_split(num_samples, fractions)?;
        Ok(Splits { train, val, test })
    }
}

/// Anything that can hand out `(conditioning, target)` pairs by index.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn geometry(&self) -> &GridGeometry;
    fn num_channels(&self) -> usize;
    fn sample(&mut self, index: usize) -> Result<(ConditioningStack, GridField)>;
}

/// Lazily materialized synthetic corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDescriptor {
    pub kind: String,
    pub nlat: usize,
    pub nlon: usize,
    pub num_samples: usize,
    pub params: SynthParams,
}

pub const SYNTHETIC_KIND: &str = "precipgan_synthetic_corpus_v1";

impl SyntheticDescriptor {
    pub fn new(nlat: usize, nlon: usize, num_samples: usize, params: SynthParams) -> Self {
        SyntheticDescriptor {
            kind: SYNTHETIC_KIND.to_string(),
            nlat,
            nlon,
            num_samples,
            params,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<SyntheticDescriptor> {
        let text = std::fs::read_to_string(path)?;
        let desc: SyntheticDescriptor = serde_json::from_str(&text)?;
        if desc.kind != SYNTHETIC_KIND {
            return Err(Error::Dataset(format!(
                "unknown descriptor kind `{}` in {}",
                desc.kind,
                path.display()
            )));
        }
        desc.params.validate()?;
        if desc.num_samples == 0 {
            return Err(Error::Dataset("descriptor has zero samples".into()));
        }
        Ok(desc)
    }
}

pub struct SyntheticDataset {
    descriptor: SyntheticDescriptor,
    geometry: GridGeometry,
}

impl SyntheticDataset {
    pub fn new(descriptor: SyntheticDescriptor) -> Result<SyntheticDataset> {
        let geometry = GridGeometry::global(descriptor.nlat, descriptor.nlon)?;
        descriptor.params.validate()?;
        Ok(SyntheticDataset {
            descriptor,
            geometry,
        })
    }

    pub fn descriptor(&self) -> &SyntheticDescriptor {
        &self.descriptor
    }
}

impl SampleSource for SyntheticDataset {
    fn len(&self) -> usize {
        self.descriptor.num_samples
    }

    fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    fn num_channels(&self) -> usize {
        self.descriptor.params.num_channels()
    }

    fn sample(&mut self, index: usize) -> Result<(ConditioningStack, GridField)> {
        if index >= self.descriptor.num_samples {
            return Err(Error::Dataset(format!(
                "sample index {index} out of range (corpus has {})",
                self.descriptor.num_samples
            )));
        }
        synth_sample(&self.geometry, &self.descriptor.params, index as u64)
    }
}

/// Streams `(stack, target)` samples into a NetCDF-3 container. The
/// classic format needs the record count up front; the iterator must yield
/// exactly `num_samples` items.
pub fn write_dataset<I>(
    path: &Path,
    geometry: &GridGeometry,
    channel_names: &[String],
    num_samples: usize,
    samples: I,
) -> Result<usize>
where
    I: IntoIterator<Item = Result<(ConditioningStack, GridField)>>,
{
    if num_samples == 0 {
        return Err(Error::Dataset("refusing to write an empty container".into()));
    }
    let (nlat, nlon) = geometry.shape();
    let nchan = channel_names.len();
    let mut ds = DataSet::new();
    let map_nc = |e: netcdf3::error::InvalidDataSet| Error::NetCdf(format!("{e:?}"));
    ds.add_fixed_dim("lat", nlat).map_err(map_nc)?;
    ds.add_fixed_dim("lon", nlon).map_err(map_nc)?;
    ds.add_fixed_dim("channel", nchan).map_err(map_nc)?;
    ds.set_unlimited_dim("time", num_samples).map_err(map_nc)?;
    ds.add_var_f64("lat", &["lat"]).map_err(map_nc)?;
    ds.add_var_f64("lon", &["lon"]).map_err(map_nc)?;
    ds.add_var_f64("tp", &["time", "lat", "lon"]).map_err(map_nc)?;
    ds.add_var_f64("channels", &["time", "channel", "lat", "lon"])
        .map_err(map_nc)?;
    ds.add_var_attr_string("lat", "units", "degrees_north")
        .map_err(map_nc)?;
    ds.add_var_attr_string("lon", "units", "degrees_east")
        .map_err(map_nc)?;
    ds.add_var_attr_string("tp", "units", Units::MmPer6hr.as_str())
        .map_err(map_nc)?;
    ds.add_var_attr_string("channels", "units", Units::Dimensionless.as_str())
        .map_err(map_nc)?;
    ds.add_global_attr_string("channel_names", &channel_names.join(";"))
        .map_err(map_nc)?;
    ds.add_global_attr_string("title", "precipgan gridded dataset")
        .map_err(map_nc)?;

    let map_w = |e: netcdf3::error::WriteError| Error::NetCdf(format!("{e:?}"));
    let mut writer = FileWriter::create_new(path).map_err(map_w)?;
    writer
        .set_def(&ds, Version::Offset64Bit, 0)
        .map_err(map_w)?;
    writer
        .write_var_f64("lat", &geometry.lat_centers)
        .map_err(map_w)?;
    writer
        .write_var_f64("lon", &geometry.lon_centers)
        .map_err(map_w)?;

    let mut count = 0usize;
    for item in samples {
        let (stack, target) = item?;
        if stack.geometry != *geometry || target.geometry != *geometry {
            return Err(Error::Dataset("sample geometry differs from container".into()));
        }
        if stack.channel_names.as_slice() != channel_names {
            return Err(Error::Dataset("sample channel names differ from container".into()));
        }
        if target.units != Units::MmPer6hr {
            return Err(Error::Dataset("target must be in mm_per_6hr".into()));
        }
        let tp_row: Vec<f64> = target.values.iter().cloned().collect();
        writer
            .write_record_f64("tp", count, &tp_row)
            .map_err(map_w)?;
        let chan_row: Vec<f64> = stack.channels.iter().cloned().collect();
        writer
            .write_record_f64("channels", count, &chan_row)
            .map_err(map_w)?;
        count += 1;
        if count > num_samples {
            return Err(Error::Dataset(format!(
                "iterator yielded more than the declared {num_samples} samples"
            )));
        }
    }
    if count != num_samples {
        return Err(Error::Dataset(format!(
            "iterator yielded {count} samples, declared {num_samples}"
        )));
    }
    writer.close().map_err(map_w)?;
    Ok(count)
}

/// Lazily reading view over a NetCDF-3 container written by
/// [`write_dataset`] (or any file following the documented schema).
pub struct StoredDataset {
    reader: FileReader,
    geometry: GridGeometry,
    channel_names: Vec<String>,
    num_samples: usize,
    /// Set when the file lacks a latitude channel and one is appended.
    synthesize_latitude: bool,
}

impl StoredDataset {
    pub fn open(path: &Path) -> Result<StoredDataset> {
        let map_r = |e: netcdf3::error::ReadError| Error::NetCdf(format!("{e:?}"));
        let mut reader = FileReader::open(path).map_err(map_r)?;

        let var = |name: &str| -> Result<(Vec<String>, usize)> {
            let v = reader.data_set().get_var(name).ok_or_else(|| {
                Error::DatasetVariable {
                    variable: name.to_string(),
                    message: "missing from container".to_string(),
                }
            })?;
            Ok((
                v.dim_names().iter().map(|d| d.to_string()).collect(),
                v.len(),
            ))
        };
        let (tp_dims, _) = var("tp")?;
        if tp_dims != ["time", "lat", "lon"] {
            return Err(Error::DatasetVariable {
                variable: "tp".into(),
                message: format!("expected dims (time, lat, lon), found {tp_dims:?}"),
            });
        }
        let (ch_dims, _) = var("channels")?;
        if ch_dims != ["time", "channel", "lat", "lon"] {
            return Err(Error::DatasetVariable {
                variable: "channels".into(),
                message: format!("expected dims (time, channel, lat, lon), found {ch_dims:?}"),
            });
        }

        let dim = |name: &str| -> Result<usize> {
            reader
                .data_set()
                .get_dim(name)
                .map(|d| d.size())
                .ok_or_else(|| Error::Dataset(format!("missing dimension `{name}`")))
        };
        let (nlat, nlon, nchan) = (dim("lat")?, dim("lon")?, dim("channel")?);
        let num_samples = dim("time")?;
        if num_samples == 0 {
            return Err(Error::Dataset("container holds no samples".into()));
        }

        let lat = reader.read_var_f64("lat").map_err(map_r)?;
        let lon = reader.read_var_f64("lon").map_err(map_r)?;
        let geometry = GridGeometry::new(nlat, nlon, lat, lon)?;

        let mut channel_names: Vec<String> = reader
            .data_set()
            .get_global_attr("channel_names")
            .and_then(|a| a.get_as_string())
            .map(|s| s.split(';').map(str::to_string).collect())
            .unwrap_or_else(|| (0..nchan).map(|i| format!("channel_{i}")).collect());
        if channel_names.len() != nchan {
            return Err(Error::DatasetVariable {
                variable: "channels".into(),
                message: format!(
                    "channel_names lists {} names for {nchan} channels",
                    channel_names.len()
                ),
            });
        }

        let synthesize_latitude = !channel_names.iter().any(|n| n == LATITUDE_CHANNEL);
        if synthesize_latitude {
            log::warn!(
                "container {} lacks a `{LATITUDE_CHANNEL}` channel; synthesizing one from the grid",
                path.display()
            );
            channel_names.push(LATITUDE_CHANNEL.to_string());
        }

        Ok(StoredDataset {
            reader,
            geometry,
            channel_names,
            num_samples,
            synthesize_latitude,
        })
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }
}

impl SampleSource for StoredDataset {
    fn len(&self) -> usize {
        self.num_samples
    }

    fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    fn num_channels(&self) -> usize {
        self.channel_names.len()
    }

    fn sample(&mut self, index: usize) -> Result<(ConditioningStack, GridField)> {
        if index >= self.num_samples {
            return Err(Error::Dataset(format!(
                "sample index {index} out of range (container has {})",
                self.num_samples
            )));
        }
        let map_r = |e: netcdf3::error::ReadError| Error::NetCdf(format!("{e:?}"));
        let (nlat, nlon) = self.geometry.shape();

        let tp_raw = self
            .reader
            .read_record_f64("tp", index)
            .map_err(map_r)?;
        if tp_raw.len() != nlat * nlon {
            return Err(Error::DatasetVariable {
                variable: "tp".into(),
                message: format!(
                    "record {index} has {} values, expected {}",
                    tp_raw.len(),
                    nlat * nlon
                ),
            });
        }
        let tp = Array2::from_shape_vec((nlat, nlon), tp_raw)
            .map_err(|e| Error::Dataset(e.to_string()))?;
        if tp.iter().any(|v| !v.is_finite()) {
            return Err(Error::DatasetVariable {
                variable: "tp".into(),
                message: format!("record {index} contains non-finite values"),
            });
        }
        let target = GridField::new(self.geometry.clone(), tp, Units::MmPer6hr)?;

        let stored_chan = if self.synthesize_latitude {
            self.channel_names.len() - 1
        } else {
            self.channel_names.len()
        };
        let ch_raw = self
            .reader
            .read_record_f64("channels", index)
            .map_err(map_r)?;
        if ch_raw.len() != stored_chan * nlat * nlon {
            return Err(Error::DatasetVariable {
                variable: "channels".into(),
                message: format!(
                    "record {index} has {} values, expected {}",
                    ch_raw.len(),
                    stored_chan * nlat * nlon
                ),
            });
        }
        if ch_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::DatasetVariable {
                variable: "channels".into(),
                message: format!("record {index} contains non-finite values"),
            });
        }
        let mut channels = Array3::zeros((self.channel_names.len(), nlat, nlon));
        {
            let stored = Array3::from_shape_vec((stored_chan, nlat, nlon), ch_raw)
                .map_err(|e| Error::Dataset(e.to_string()))?;
            channels
                .slice_mut(ndarray::s![..stored_chan, .., ..])
                .assign(&stored);
        }
        if self.synthesize_latitude {
            channels
                .index_axis_mut(ndarray::Axis(0), stored_chan)
                .assign(&make_latitude_channel(&self.geometry));
        }
        let stack =
            ConditioningStack::new(self.geometry.clone(), channels, self.channel_names.clone())?;
        Ok((stack, target))
    }
}

/// Opens either container flavor, sniffing the format: NetCDF-3 files begin
/// with the magic bytes `CDF`, descriptors are JSON.
pub fn open_dataset(path: &Path) -> Result<Box<dyn SampleSource>> {
    let mut magic = [0u8; 3];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path)?;
        let n = f.read(&mut magic)?;
        if n < 3 {
            return Err(Error::Dataset(format!("{} is too short", path.display())));
        }
    }
    if &magic == b"CDF" {
        Ok(Box::new(StoredDataset::open(path)?))
    } else {
        let desc = SyntheticDescriptor::read(path)?;
        Ok(Box::new(SyntheticDataset::new(desc)?))
    }
}

/// Writes a single-field result container (used by `infer`).
pub fn write_field(path: &Path, field: &GridField, var_name: &str) -> Result<()> {
    let (nlat, nlon) = field.geometry.shape();
    let mut ds = DataSet::new();
    let map_nc = |e: netcdf3::error::InvalidDataSet| Error::NetCdf(format!("{e:?}"));
    ds.add_fixed_dim("lat", nlat).map_err(map_nc)?;
    ds.add_fixed_dim("lon", nlon).map_err(map_nc)?;
    ds.add_var_f64("lat", &["lat"]).map_err(map_nc)?;
    ds.add_var_f64("lon", &["lon"]).map_err(map_nc)?;
    ds.add_var_f64(var_name, &["lat", "lon"]).map_err(map_nc)?;
    ds.add_var_attr_string(var_name, "units", field.units.as_str())
        .map_err(map_nc)?;
    let map_w = |e: netcdf3::error::WriteError| Error::NetCdf(format!("{e:?}"));
    let mut writer = FileWriter::create_new(path).map_err(map_w)?;
    writer
        .set_def(&ds, Version::Offset64Bit, 0)
        .map_err(map_w)?;
    writer
        .write_var_f64("lat", &field.geometry.lat_centers)
        .map_err(map_w)?;
    writer
        .write_var_f64("lon", &field.geometry.lon_centers)
        .map_err(map_w)?;
    let values: Vec<f64> = field.values.iter().cloned().collect();
    writer.write_var_f64(var_name, &values).map_err(map_w)?;
    writer.close().map_err(map_w)?;
    Ok(())
}

/// Writes an ensemble result container: `mean(lat, lon)`, `std(lat, lon)`
/// and optionally `members(member, lat, lon)`.
pub fn write_ensemble(
    path: &Path,
    mean: &GridField,
    std: &GridField,
    members: Option<&[GridField]>,
) -> Result<()> {
    let (nlat, nlon) = mean.geometry.shape();
    let mut ds = DataSet::new();
    let map_nc = |e: netcdf3::error::InvalidDataSet| Error::NetCdf(format!("{e:?}"));
    ds.add_fixed_dim("lat", nlat).map_err(map_nc)?;
    ds.add_fixed_dim("lon", nlon).map_err(map_nc)?;
    ds.add_var_f64("lat", &["lat"]).map_err(map_nc)?;
    ds.add_var_f64("lon", &["lon"]).map_err(map_nc)?;
    ds.add_var_f64("mean", &["lat", "lon"]).map_err(map_nc)?;
    ds.add_var_f64("std", &["lat", "lon"]).map_err(map_nc)?;
    ds.add_var_attr_string("mean", "units", mean.units.as_str())
        .map_err(map_nc)?;
    ds.add_var_attr_string("std", "units", std.units.as_str())
        .map_err(map_nc)?;
    if let Some(members) = members {
        ds.add_fixed_dim("member", members.len()).map_err(map_nc)?;
        ds.add_var_f64("members", &["member", "lat", "lon"])
            .map_err(map_nc)?;
        ds.add_var_attr_string("members", "units", mean.units.as_str())
            .map_err(map_nc)?;
    }
    let map_w = |e: netcdf3::error::WriteError| Error::NetCdf(format!("{e:?}"));
    let mut writer = FileWriter::create_new(path).map_err(map_w)?;
    writer
        .set_def(&ds, Version::Offset64Bit, 0)
        .map_err(map_w)?;
    writer
        .write_var_f64("lat", &mean.geometry.lat_centers)
        .map_err(map_w)?;
    writer
        .write_var_f64("lon", &mean.geometry.lon_centers)
        .map_err(map_w)?;
    let flat = |f: &GridField| -> Vec<f64> { f.values.iter().cloned().collect() };
    writer.write_var_f64("mean", &flat(mean)).map_err(map_w)?;
    writer.write_var_f64("std", &flat(std)).map_err(map_w)?;
    if let Some(members) = members {
        let mut all = Vec::with_capacity(members.len() * nlat * nlon);
        for m in members {
            all.extend(m.values.iter().cloned());
        }
        writer.write_var_f64("members", &all).map_err(map_w)?;
    }
    writer.close().map_err(map_w)?;
    Ok(())
}

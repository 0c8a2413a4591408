use std::io::Write;
use std::path::Path;

use super::{
    append_time_features, build_windows, ingest, normalize, split_samples, Dataset, DatasetConfig, DatasetSplit, EnergyType,
    IngestOptions, IngestReport, ProblemDims, CYCLICAL_FEATURES,
};
use crate::error::{Error, Result};

/// A dataset turned into normalized, split model inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub dims: ProblemDims,
    pub report: IngestReport,
    /// Calendar encodings were appended to the weather variables.
    pub time_features: bool,
}

impl Prepared {
    /// Capacity per site in declaration order (1.0 where none was declared).
    pub fn capacities(&self) -> Vec<f64> {
        self.split.stats.as_ref().map(|s| s.capacities.clone()).unwrap_or_default()
    }
}

/// Read every file named by `cfg` and prepare it.
pub fn prepare(cfg: &DatasetConfig) -> Result<Prepared> {
    let options = IngestOptions { variables: cfg.variables.clone(), max_interpolated_gap: cfg.max_interpolated_gap };
    let (dataset, report) = ingest(&cfg.energy_files, &cfg.weather_files, &options)?;
    for r in &report.rejected {
        log::warn!("{}:{}: {}", r.file.display(), r.line, r.reason);
    }
    prepare_dataset(dataset, report, cfg)
}

/// Window, split and normalize an in-memory dataset. Solar datasets get
/// calendar encodings appended to each weather location.
pub fn prepare_dataset(dataset: Dataset, report: IngestReport, cfg: &DatasetConfig) -> Result<Prepared> {
    let ids = dataset.site_ids();
    if let Some(unknown) = cfg.capacity.keys().find(|k| !ids.contains(k)) {
        return Err(Error::Config(format!("capacity given for unknown site `{unknown}`")));
    }
    let capacities: Vec<Option<f64>> = ids.iter().map(|id| cfg.capacity.get(id).copied()).collect();
    let windows = build_windows(&dataset, cfg.history, cfg.horizon, cfg.stride)?;
    if windows.too_short {
        return Err(Error::Empty(format!(
            "series of {} hours cannot hold one {}+{} window",
            dataset.len(),
            cfg.history,
            cfg.horizon
        )));
    }
    let split = split_samples(windows.samples, &cfg.splits);
    log::info!("samples: train {}, validation {}, test {}", split.train.len(), split.validation.len(), split.test.len());
    let mut split = normalize(split, &capacities)?;
    let time_features = cfg.energy_type == EnergyType::Solar;
    if time_features {
        append_time_features(&mut split.train)?;
        append_time_features(&mut split.validation)?;
        append_time_features(&mut split.test)?;
    }
    let dims = ProblemDims {
        energy_sites: dataset.energy.len(),
        weather_sites: dataset.weather.len(),
        history: cfg.history,
        horizon: cfg.horizon,
        weather_vars: dataset.variable_names.len() + if time_features { CYCLICAL_FEATURES } else { 0 },
    };
    Ok(Prepared { dataset, split, dims, report, time_features })
}

/// Write a dataset in the ingestion schema: one energy file
/// (`timestamp,site_id,value`) and one weather file
/// (`timestamp,location_id,<variables>`).
pub fn write_dataset_csv(ds: &Dataset, energy_path: &Path, weather_path: &Path) -> Result<()> {
    let stamp = |i: usize| ds.timeline[i].format("%Y-%m-%dT%H:%M:%SZ").to_string();
    let open = |p: &Path| std::fs::File::create(p).map(std::io::BufWriter::new).map_err(|e| Error::io(p, e));

    let mut w = open(energy_path)?;
    let write =
        |w: &mut std::io::BufWriter<std::fs::File>, line: String, p: &Path| writeln!(w, "{line}").map_err(|e| Error::io(p, e));
    write(&mut w, "timestamp,site_id,value".into(), energy_path)?;
    for e in &ds.energy {
        for (i, v) in e.values.iter().enumerate() {
            write(&mut w, format!("{},{},{v}", stamp(i), e.site_id), energy_path)?;
        }
    }
    w.flush().map_err(|e| Error::io(energy_path, e))?;

    let mut w = open(weather_path)?;
    write(&mut w, format!("timestamp,location_id,{}", ds.variable_names.join(",")), weather_path)?;
    let d = ds.variable_names.len();
    for loc in &ds.weather {
        for (i, row) in loc.variables.data().chunks(d).enumerate() {
            let vals: Vec<String> = row.iter().map(f64::to_string).collect();
            write(&mut w, format!("{},{},{}", stamp(i), loc.location_id, vals.join(",")), weather_path)?;
        }
    }
    w.flush().map_err(|e| Error::io(weather_path, e))
}

//! On-disk formats.
//!
//! Checkpoints are one binary container: an 8-byte magic, a little-endian
//! `u32` version, a `u64` header length, a JSON header (parameter space,
//! flow hyperparameters, coupling masks, section table) and then each
//! section as little-endian `f64` values. CSVs use `.` decimals, a header
//! row and fixed column orders; floats are written in shortest round-trip
//! form so a file read back reproduces the values exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{BagEntry, ObservationBag};
use crate::error::{Error, Result};
use crate::eval::{BoxSummary, CornerData, CoverageCurve, PpcDraw};
use crate::flow::{ConditionalFlow, FlowConfig};
use crate::mixture::{MixtureFit, SweepResult};
use crate::npe::TrainReport;
use crate::param_space::ParamSpace;
use crate::scalar::Scalar;
use crate::simulator::{Dataset, Observation, Record, Split, SplitFractions, FEATURE_DIM};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DOMCHAR\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub space: ParamSpace,
    pub context_dim: usize,
    pub config: FlowConfig,
    pub masks: Vec<Vec<usize>>,
    pub sections: Vec<SectionInfo>,
}

pub fn checkpoint_bytes<T: Scalar>(flow: &ConditionalFlow<T>) -> Result<Vec<u8>> {
    let sections: Vec<(String, &[T])> = flow
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("layer{i}.conditioner"), l.conditioner().params()))
        .collect();
    let header = CheckpointHeader {
        space: flow.space().clone(),
        context_dim: flow.context_dim(),
        config: flow.config().clone(),
        masks: flow.layers().iter().map(|l| l.transformed().to_vec()).collect(),
        sections: sections
            .iter()
            .map(|(name, p)| SectionInfo {
                name: name.clone(),
                len: p.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * flow.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, params) in sections {
        for p in params {
            out.extend_from_slice(&p.to_f64_lossy().to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("checkpoint truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn checkpoint_from_bytes<T: Scalar>(mut bytes: &[u8]) -> Result<ConditionalFlow<T>> {
    if take(&mut bytes, 8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a flow checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(take(&mut bytes, 8, "header length")?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(&mut bytes, hlen, "header")?)?;
    let space = ParamSpace::new(header.space.dims().to_vec())?;
    let mut params = Vec::with_capacity(header.sections.len());
    for s in &header.sections {
        let raw = take(&mut bytes, 8 * s.len, &s.name)?;
        params.push(
            raw.chunks_exact(8)
                .map(|c| T::c(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        );
    }
    if !bytes.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len())));
    }
    ConditionalFlow::from_parts(space, header.context_dim, header.config, header.masks, params)
}

pub fn save_checkpoint<T: Scalar>(flow: &ConditionalFlow<T>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(flow)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ConditionalFlow<T>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn reader(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    Ok(csv::Reader::from_reader(BufReader::new(File::open(path)?)))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn parse(field: Option<&str>, what: &str) -> Result<f64> {
    field
        .ok_or_else(|| Error::Format(format!("missing column {what}")))?
        .parse()
        .map_err(|_| Error::Format(format!("bad number in column {what}")))
}

fn feature_columns() -> Vec<String> {
    (1..=FEATURE_DIM).map(|i| format!("o{i}")).collect()
}

fn write_rows<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    reader(path)?.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Sidecar metadata of a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub n: usize,
    pub fractions: SplitFractions,
    pub columns: Vec<String>,
    pub space: ParamSpace,
}

pub fn dataset_columns(space: &ParamSpace) -> Vec<String> {
    let mut cols: Vec<String> = space.dims().iter().map(|d| d.name.clone()).collect();
    cols.push("noise_seed".into());
    cols.extend(feature_columns());
    cols.push("split".into());
    cols
}

/// Path of the metadata sidecar next to a dataset CSV.
pub fn meta_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("meta.json")
}

/// Writes `path` (CSV) and its `.meta.json` sidecar.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let cols = dataset_columns(&ds.space);
    let mut w = writer(path)?;
    w.write_record(&cols)?;
    for r in &ds.records {
        let mut row: Vec<String> = r.params.iter().map(|&v| num(v)).collect();
        row.push(r.noise_seed.to_string());
        row.extend(r.observation.features.iter().map(|&v| num(v)));
        row.push(r.split.as_str().into());
        w.write_record(&row)?;
    }
    w.flush()?;
    let meta = DatasetMeta {
        seed: ds.seed,
        n: ds.records.len(),
        fractions: ds.fractions,
        columns: cols,
        space: ds.space.clone(),
    };
    std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let meta_file = meta_path(path);
    let meta: DatasetMeta = serde_json::from_slice(
        &std::fs::read(&meta_file).map_err(|e| Error::Format(format!("cannot read {}: {e}", meta_file.display())))?,
    )?;
    let space = ParamSpace::new(meta.space.dims().to_vec())?;
    let mut rd = reader(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    let expected = dataset_columns(&space);
    if header != expected {
        return Err(Error::Format(format!("dataset columns {header:?} differ from {expected:?}")));
    }
    let np = space.len();
    let mut records = Vec::new();
    for row in rd.records() {
        let row = row?;
        let params = (0..np).map(|i| parse(row.get(i), &header[i])).collect::<Result<Vec<_>>>()?;
        let noise_seed = row
            .get(np)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad noise_seed".into()))?;
        let mut features = [0.0; FEATURE_DIM];
        for (k, f) in features.iter_mut().enumerate() {
            *f = parse(row.get(np + 1 + k), &header[np + 1 + k])?;
        }
        let split = Split::parse(row.get(np + 1 + FEATURE_DIM).unwrap_or(""))?;
        records.push(Record {
            params,
            noise_seed,
            observation: Observation { features },
            split,
        });
    }
    if records.len() != meta.n {
        return Err(Error::Format(format!("metadata promises {} records, found {}", meta.n, records.len())));
    }
    Ok(Dataset {
        space,
        seed: meta.seed,
        fractions: meta.fractions,
        records,
    })
}

pub fn write_train_report(report: &TrainReport, path: &Path) -> Result<()> {
    write_rows(path, &report.epochs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub gamma: f64,
    pub coverage: f64,
}

pub fn write_coverage(curve: &CoverageCurve, path: &Path) -> Result<()> {
    write_rows(
        path,
        curve.levels.iter().zip(&curve.coverage).map(|(&gamma, &coverage)| CoverageRow { gamma, coverage }),
    )
}

pub fn read_coverage(path: &Path) -> Result<Vec<CoverageRow>> {
    read_rows(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiRow {
    pub pair: usize,
    pub pi: f64,
}

pub fn write_pi(pi: &[f64], path: &Path) -> Result<()> {
    write_rows(path, pi.iter().enumerate().map(|(pair, &pi)| PiRow { pair, pi }))
}

pub fn read_pi(path: &Path) -> Result<Vec<PiRow>> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiSummaryRow {
    pub model: String,
    pub count: usize,
    pub min: f64,
    pub whisker_low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_high: f64,
    pub max: f64,
    pub mean: f64,
}

pub fn write_pi_summary(model: &str, s: &BoxSummary, path: &Path) -> Result<()> {
    write_rows(
        path,
        [PiSummaryRow {
            model: model.into(),
            count: s.count,
            min: s.min,
            whisker_low: s.whisker_low,
            q1: s.q1,
            median: s.median,
            q3: s.q3,
            whisker_high: s.whisker_high,
            max: s.max,
            mean: s.mean,
        }],
    )
}

pub fn read_pi_summary(path: &Path) -> Result<Vec<PiSummaryRow>> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcRow {
    pub record: usize,
    pub kind: String,
    pub draw: usize,
    pub distance: f64,
}

/// PPC distances; `kind` is `posterior` or `prior`.
pub fn write_ppc(rows: &[(usize, &str, &[PpcDraw])], path: &Path) -> Result<()> {
    write_rows(
        path,
        rows.iter().flat_map(|(record, kind, draws)| {
            draws.iter().enumerate().map(move |(draw, d)| PpcRow {
                record: *record,
                kind: kind.to_string(),
                draw,
                distance: d.distance,
            })
        }),
    )
}

pub fn read_ppc(path: &Path) -> Result<Vec<PpcRow>> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRow {
    pub dim: usize,
    pub name: String,
    pub bin: usize,
    pub center: f64,
    pub mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub dim_i: usize,
    pub dim_j: usize,
    pub bin_i: usize,
    pub bin_j: usize,
    pub density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub dim_i: usize,
    pub dim_j: usize,
    pub credibility: f64,
    pub density: f64,
}

/// Writes `<prefix>_marginals.csv`, `<prefix>_pairs.csv` and
/// `<prefix>_levels.csv` into `dir`.
pub fn write_corner(cd: &CornerData, dir: &Path, prefix: &str) -> Result<()> {
    write_rows(
        &dir.join(format!("{prefix}_marginals.csv")),
        cd.marginals.iter().enumerate().flat_map(|(dim, m)| {
            m.iter().enumerate().map(move |(bin, &mass)| MarginalRow {
                dim,
                name: cd.names[dim].clone(),
                bin,
                center: cd.bin_center(dim, bin),
                mass,
            })
        }),
    )?;
    let res = cd.resolution;
    write_rows(
        &dir.join(format!("{prefix}_pairs.csv")),
        cd.pairs.iter().flat_map(|p| {
            p.density.iter().enumerate().map(move |(k, &density)| GridRow {
                dim_i: p.i,
                dim_j: p.j,
                bin_i: k / res,
                bin_j: k % res,
                density,
            })
        }),
    )?;
    write_rows(
        &dir.join(format!("{prefix}_levels.csv")),
        cd.pairs.iter().flat_map(|p| {
            crate::eval::CORNER_LEVELS.iter().zip(p.levels).map(move |(&credibility, density)| LevelRow {
                dim_i: p.i,
                dim_j: p.j,
                credibility,
                density,
            })
        }),
    )
}

pub fn read_corner_marginals(path: &Path) -> Result<Vec<MarginalRow>> {
    read_rows(path)
}

pub fn read_corner_pairs(path: &Path) -> Result<Vec<GridRow>> {
    read_rows(path)
}

/// Bag CSV: `o1..o8, weight` and an optional trailing `timestamp` column.
pub fn write_bag(bag: &ObservationBag, path: &Path) -> Result<()> {
    let with_ts = bag.entries().iter().any(|e| e.timestamp.is_some());
    let mut cols = feature_columns();
    cols.push("weight".into());
    if with_ts {
        cols.push("timestamp".into());
    }
    let mut w = writer(path)?;
    w.write_record(&cols)?;
    for e in bag.entries() {
        let mut row: Vec<String> = e.observation.features.iter().map(|&v| num(v)).collect();
        row.push(num(e.weight));
        if with_ts {
            row.push(e.timestamp.map(num).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bag(path: &Path) -> Result<ObservationBag> {
    let mut rd = reader(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let feats = feature_columns()
        .iter()
        .map(|c| col(c).ok_or_else(|| Error::Format(format!("bag lacks column {c}"))))
        .collect::<Result<Vec<_>>>()?;
    let wcol = col("weight");
    let tcol = col("timestamp");
    let mut entries = Vec::new();
    for row in rd.records() {
        let row = row?;
        let mut features = [0.0; FEATURE_DIM];
        for (f, &c) in features.iter_mut().zip(&feats) {
            *f = parse(row.get(c), &header[c])?;
        }
        let weight = match wcol {
            Some(c) => parse(row.get(c), "weight")?,
            None => 1.0,
        };
        let timestamp = match tcol.and_then(|c| row.get(c)).filter(|s| !s.is_empty()) {
            Some(s) => Some(s.parse().map_err(|_| Error::Format("bad timestamp".into()))?),
            None => None,
        };
        entries.push(BagEntry {
            observation: Observation { features },
            weight,
            timestamp,
        });
    }
    ObservationBag::new(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub source: usize,
    pub lambda_hat: f64,
}

pub fn write_weights(fit: &MixtureFit, path: &Path) -> Result<()> {
    write_rows(
        path,
        fit.weights.iter().enumerate().map(|(source, &lambda_hat)| WeightRow { source, lambda_hat }),
    )
}

pub fn read_weights(path: &Path) -> Result<Vec<WeightRow>> {
    read_rows(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub eta: f64,
    pub rep: usize,
    #[serde(rename = "d_E")]
    pub d_e: f64,
    pub delta: f64,
    pub baseline_median: f64,
}

pub fn write_sweep(result: &SweepResult, path: &Path) -> Result<()> {
    write_rows(
        path,
        result.rows.iter().map(|r| SweepCsvRow {
            eta: r.eta,
            rep: r.rep,
            d_e: r.d_e,
            delta: r.delta,
            baseline_median: r.baseline_median,
        }),
    )
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepCsvRow>> {
    read_rows(path)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

//! File formats and time-tag binning.
//!
//! # Time-tag binary format
//!
//! All integers little-endian:
//!
//! ```text
//! u64                 record count n
//! n × { u64 timestamp_ns, u8 channel }   channel 0 = photon, 1 = sync
//! ```
//!
//! Timestamps must be non-decreasing and the file must end exactly after
//! the last record.
//!
//! # CSV files
//!
//! Traces, histograms and calibrations are CSV with a header row. Leading
//! lines of the form `# key=value` carry metadata: `dt_ns` (bin width),
//! `n_meas` (histograms), `n_cal` (calibrations) and any configuration
//! echoed by the writer. Other comment lines are ignored.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{CalibrationPair, HistogramData, Method};
use crate::fitting::{
    ConstraintMode, Constraints, Dataset, FitProblem, LifetimeConstraint, Weighting,
};
use crate::photophysics::{FluorescenceTrace, DEFAULT_BIN_WIDTH_NS};
use crate::synth::{MonteCarloResult, SnrPoint};

/// Bytes per record in the binary time-tag format.
pub const RECORD_BYTES: u64 = 9;
const HEADER_BYTES: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Photon,
    Sync,
}

impl Channel {
    fn code(self) -> u8 {
        match self {
            Channel::Photon => 0,
            Channel::Sync => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeTagRecord {
    /// ns since acquisition start.
    pub timestamp_ns: u64,
    pub channel: Channel,
}

impl TimeTagRecord {
    pub fn photon(timestamp_ns: u64) -> Self {
        Self { timestamp_ns, channel: Channel::Photon }
    }

    pub fn sync(timestamp_ns: u64) -> Self {
        Self { timestamp_ns, channel: Channel::Sync }
    }
}

/// Streaming reader over the binary time-tag format. Yields each record
/// once and validates framing and ordering as it goes.
pub struct TimeTagReader<R: Read> {
    inner: R,
    remaining: u64,
    offset: u64,
    last: u64,
    done: bool,
}

impl<R: Read> TimeTagReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut header = [0u8; 8];
        read_full(&mut inner, &mut header).map_err(|got| Error::MalformedRecord {
            offset: got,
            message: "truncated header".into(),
        })?;
        Ok(Self {
            inner,
            remaining: u64::from_le_bytes(header),
            offset: HEADER_BYTES,
            last: 0,
            done: false,
        })
    }

    /// Records announced by the header and not yet read.
    pub fn remaining(&self) -> u64 {
        self.remaining
    }

    fn next_record(&mut self) -> Result<Option<TimeTagRecord>> {
        if self.remaining == 0 {
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe) {
                Ok(0) => Ok(None),
                Ok(_) => Err(Error::MalformedRecord {
                    offset: self.offset,
                    message: "trailing bytes after the last record".into(),
                }),
                Err(e) => Err(e.into()),
            };
        }
        let mut buf = [0u8; RECORD_BYTES as usize];
        read_full(&mut self.inner, &mut buf).map_err(|got| Error::MalformedRecord {
            offset: self.offset + got,
            message: format!("truncated record, {} records missing", self.remaining),
        })?;
        let timestamp_ns = u64::from_le_bytes(buf[..8].try_into().expect("8 bytes"));
        let channel = match buf[8] {
            0 => Channel::Photon,
            1 => Channel::Sync,
            c => {
                return Err(Error::MalformedRecord {
                    offset: self.offset + 8,
                    message: format!("unknown channel {c}"),
                })
            }
        };
        if timestamp_ns < self.last {
            return Err(Error::MalformedRecord {
                offset: self.offset,
                message: format!("timestamp {timestamp_ns} precedes {}", self.last),
            });
        }
        self.last = timestamp_ns;
        self.offset += RECORD_BYTES;
        self.remaining -= 1;
        Ok(Some(TimeTagRecord { timestamp_ns, channel }))
    }
}

impl<R: Read> Iterator for TimeTagReader<R> {
    type Item = Result<TimeTagRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = self.next_record().transpose();
        if !matches!(item, Some(Ok(_))) {
            self.done = true;
        }
        item
    }
}

/// Fills `buf`, returning the number of bytes obtained on a short read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::result::Result<(), u64> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => return Err(got as u64),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(_) => return Err(got as u64),
        }
    }
    Ok(())
}

/// Writes the binary format. The record count goes first, so it must be
/// known up front; [`TimeTagWriter::finish`] checks it was honored.
pub struct TimeTagWriter<W: Write> {
    inner: W,
    expected: u64,
    written: u64,
    last: u64,
}

impl<W: Write> TimeTagWriter<W> {
    pub fn new(mut inner: W, count: u64) -> Result<Self> {
        inner.write_all(&count.to_le_bytes())?;
        Ok(Self { inner, expected: count, written: 0, last: 0 })
    }

    pub fn write(&mut self, record: &TimeTagRecord) -> Result<()> {
        if self.written == self.expected {
            return Err(Error::InvalidInput(format!(
                "more than the announced {} records",
                self.expected
            )));
        }
        if record.timestamp_ns < self.last {
            return Err(Error::InvalidInput(format!(
                "timestamp {} precedes {}",
                record.timestamp_ns, self.last
            )));
        }
        self.inner.write_all(&record.timestamp_ns.to_le_bytes())?;
        self.inner.write_all(&[record.channel.code()])?;
        self.last = record.timestamp_ns;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.expected {
            return Err(Error::InvalidInput(format!(
                "announced {} records but wrote {}",
                self.expected, self.written
            )));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_time_tags(path: &Path, records: &[TimeTagRecord]) -> Result<()> {
    let mut w = TimeTagWriter::new(BufWriter::new(File::create(path)?), records.len() as u64)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()?;
    Ok(())
}

pub fn open_time_tags(path: &Path) -> Result<TimeTagReader<BufReader<File>>> {
    TimeTagReader::new(BufReader::new(File::open(path)?))
}

/// Histogram geometry in integer picoseconds, so 8.33 ns bins are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinningConfig {
    pub bin_width_ps: u64,
    pub n_bins: usize,
    /// Delay from a sync marker to the start of bin 0.
    pub sync_offset_ps: i64,
}

impl BinningConfig {
    /// Rounds the ns inputs to the nearest picosecond.
    pub fn from_ns(dt_ns: f64, n_bins: usize, sync_offset_ns: f64) -> Result<Self> {
        if !(dt_ns > 0.0) || !dt_ns.is_finite() || !sync_offset_ns.is_finite() {
            return Err(Error::InvalidInput(format!(
                "bin width must be positive and offset finite, got {dt_ns} and {sync_offset_ns}"
            )));
        }
        let config = Self {
            bin_width_ps: (dt_ns * 1000.0).round() as u64,
            n_bins,
            sync_offset_ps: (sync_offset_ns * 1000.0).round() as i64,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_width_ps == 0 || self.n_bins == 0 {
            return Err(Error::InvalidInput(
                "binning needs a positive bin width and at least one bin".into(),
            ));
        }
        Ok(())
    }

    pub fn dt_ns(&self) -> f64 {
        self.bin_width_ps as f64 / 1000.0
    }

    pub fn window_ps(&self) -> i128 {
        self.bin_width_ps as i128 * self.n_bins as i128
    }

    /// Bin of a photon `delay_ps` after its sync, if inside the window.
    pub fn bin_of(&self, delay_ps: i128) -> Option<usize> {
        let rel = delay_ps - self.sync_offset_ps as i128;
        (rel >= 0 && rel < self.window_ps()).then(|| (rel / self.bin_width_ps as i128) as usize)
    }
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            bin_width_ps: (DEFAULT_BIN_WIDTH_NS * 1000.0).round() as u64,
            n_bins: 240,
            sync_offset_ps: 0,
        }
    }
}

/// Histogram plus bookkeeping from a binning pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningOutcome {
    pub histogram: HistogramData,
    pub photons_total: u64,
    pub photons_in_window: u64,
    /// Photons before the first sync or outside the window.
    pub discarded: u64,
    pub syncs: u64,
}

/// Single-pass binner. Each photon is referenced to the most recent sync
/// marker before it in stream order.
#[derive(Debug, Clone)]
pub struct Binner {
    config: BinningConfig,
    counts: Vec<u64>,
    last_sync: Option<u64>,
    syncs: u64,
    photons: u64,
    discarded: u64,
}

impl Binner {
    pub fn new(config: BinningConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            counts: vec![0; config.n_bins],
            config,
            last_sync: None,
            syncs: 0,
            photons: 0,
            discarded: 0,
        })
    }

    pub fn push(&mut self, record: &TimeTagRecord) {
        match record.channel {
            Channel::Sync => {
                self.last_sync = Some(record.timestamp_ns);
                self.syncs += 1;
            }
            Channel::Photon => {
                self.photons += 1;
                let bin = self.last_sync.and_then(|s| {
                    let delay_ps = (record.timestamp_ns as i128 - s as i128) * 1000;
                    self.config.bin_of(delay_ps)
                });
                match bin {
                    Some(i) => self.counts[i] += 1,
                    None => self.discarded += 1,
                }
            }
        }
    }

    pub fn finish(self) -> Result<BinningOutcome> {
        if self.syncs == 0 {
            return Err(Error::NoSync);
        }
        Ok(BinningOutcome {
            photons_in_window: self.photons - self.discarded,
            histogram: HistogramData::new(self.config.dt_ns(), self.counts, self.syncs)?,
            photons_total: self.photons,
            discarded: self.discarded,
            syncs: self.syncs,
        })
    }
}

/// Bins a record stream. `n_meas` of the histogram is the sync count.
pub fn bin_time_tags<I>(records: I, config: &BinningConfig) -> Result<BinningOutcome>
where
    I: IntoIterator<Item = Result<TimeTagRecord>>,
{
    let mut binner = Binner::new(*config)?;
    for r in records {
        binner.push(&r?);
    }
    binner.finish()
}

/// `# key=value` header lines of a CSV file.
pub type Metadata = BTreeMap<String, String>;

/// Metadata comments, a header row and the given rows.
pub fn write_table_csv<W: Write>(
    mut out: W,
    metadata: &Metadata,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    for (k, v) in metadata {
        writeln!(out, "# {k}={}", v.replace('\n', " "))?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed CSV body: metadata, column names and numeric rows with their
/// 1-based line numbers.
struct Table {
    metadata: Metadata,
    rows: Vec<(usize, csv::StringRecord)>,
}

fn read_csv<R: Read>(input: R, header: &[&str]) -> Result<Table> {
    let mut reader = BufReader::new(input);
    let mut metadata = Metadata::new();
    let mut line = String::new();
    let mut line_no = 0;
    // comments before the header
    let header_line = loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Schema {
                line: line_no + 1,
                field: header.join(","),
                message: "missing header row".into(),
            });
        }
        line_no += 1;
        let t = line.trim();
        if let Some(c) = t.strip_prefix('#') {
            if let Some((k, v)) = c.trim().split_once('=') {
                metadata.insert(k.trim().to_string(), v.trim().to_string());
            }
        } else if !t.is_empty() {
            break t.to_string();
        }
    };
    let columns: Vec<&str> = header_line.split(',').map(str::trim).collect();
    if columns != header {
        let field = header
            .iter()
            .zip(columns.iter().chain(std::iter::repeat(&"")))
            .find(|(a, b)| a != b)
            .map(|(a, _)| a.to_string())
            .unwrap_or_else(|| columns[header.len()].to_string());
        return Err(Error::Schema {
            line: line_no,
            field,
            message: format!("expected header `{}`, found `{header_line}`", header.join(",")),
        });
    }
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows = Vec::new();
    for rec in csv_reader.records() {
        let rec = rec?;
        let line = line_no + rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::Schema {
                line,
                field: header.get(rec.len()).unwrap_or(&header[header.len() - 1]).to_string(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push((line, rec));
    }
    Ok(Table { metadata, rows })
}

impl Table {
    fn f64_at(&self, row: usize, col: usize, name: &str) -> Result<f64> {
        let (line, rec) = &self.rows[row];
        let s = &rec[col];
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Schema {
                line: *line,
                field: name.into(),
                message: format!("`{s}` is not a finite number"),
            })
    }

    fn u64_at(&self, row: usize, col: usize, name: &str) -> Result<u64> {
        let (line, rec) = &self.rows[row];
        let s = &rec[col];
        s.parse::<u64>().map_err(|_| Error::Schema {
            line: *line,
            field: name.into(),
            message: format!("`{s}` is not a non-negative integer"),
        })
    }

    fn meta<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.metadata
            .get(key)
            .map(|v| {
                v.parse::<T>().map_err(|_| Error::Schema {
                    line: 0,
                    field: key.into(),
                    message: format!("metadata `{v}` does not parse"),
                })
            })
            .transpose()
    }

    /// Bin width from metadata, else from the first two start times, and a
    /// check that every start time sits on the `i · dt` grid.
    fn bin_width(&self) -> Result<f64> {
        let dt = match self.meta::<f64>("dt_ns")? {
            Some(dt) => dt,
            None if self.rows.len() >= 2 => self.f64_at(1, 0, "t_start_ns")? - self.f64_at(0, 0, "t_start_ns")?,
            None => {
                return Err(Error::Schema {
                    line: 0,
                    field: "dt_ns".into(),
                    message: "single-row file needs `# dt_ns=` metadata".into(),
                })
            }
        };
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Schema {
                line: 0,
                field: "dt_ns".into(),
                message: format!("bin width must be positive, got {dt}"),
            });
        }
        for i in 0..self.rows.len() {
            let t = self.f64_at(i, 0, "t_start_ns")?;
            if (t - i as f64 * dt).abs() > 1e-6 * dt.max(1.0) {
                return Err(Error::Schema {
                    line: self.rows[i].0,
                    field: "t_start_ns".into(),
                    message: format!("expected {} for bin {i}, found {t}", i as f64 * dt),
                });
            }
        }
        Ok(dt)
    }

    fn first_line(&self) -> usize {
        self.rows.first().map_or(0, |r| r.0)
    }

    fn nonempty(&self, field: &str) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Schema {
                line: 0,
                field: field.into(),
                message: "file holds no bins".into(),
            });
        }
        Ok(())
    }
}

fn t_start(i: usize, dt: f64) -> String {
    (i as f64 * dt).to_string()
}

pub fn write_trace_csv<W: Write>(out: W, trace: &FluorescenceTrace, metadata: &Metadata) -> Result<()> {
    let mut meta = metadata.clone();
    meta.insert("dt_ns".into(), trace.dt.to_string());
    write_table_csv(
        out,
        &meta,
        &["t_start_ns", "mean_photons"],
        trace.bins.iter().enumerate().map(|(i, m)| vec![t_start(i, trace.dt), m.to_string()]),
    )
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<(FluorescenceTrace, Metadata)> {
    let table = read_csv(input, &["t_start_ns", "mean_photons"])?;
    table.nonempty("mean_photons")?;
    let dt = table.bin_width()?;
    let bins = (0..table.rows.len())
        .map(|i| table.f64_at(i, 1, "mean_photons"))
        .collect::<Result<Vec<_>>>()?;
    let trace = FluorescenceTrace::new(dt, bins).map_err(|e| Error::Schema {
        line: table.first_line(),
        field: "mean_photons".into(),
        message: e.to_string(),
    })?;
    Ok((trace, table.metadata))
}

pub fn write_histogram_csv<W: Write>(out: W, data: &HistogramData, metadata: &Metadata) -> Result<()> {
    let mut meta = metadata.clone();
    meta.insert("dt_ns".into(), data.dt.to_string());
    meta.insert("n_meas".into(), data.n_meas.to_string());
    write_table_csv(
        out,
        &meta,
        &["t_start_ns", "counts"],
        data.counts.iter().enumerate().map(|(i, c)| vec![t_start(i, data.dt), c.to_string()]),
    )
}

pub fn read_histogram_csv<R: Read>(input: R) -> Result<(HistogramData, Metadata)> {
    let table = read_csv(input, &["t_start_ns", "counts"])?;
    table.nonempty("counts")?;
    let dt = table.bin_width()?;
    let n_meas = table.meta::<u64>("n_meas")?.ok_or_else(|| Error::Schema {
        line: 0,
        field: "n_meas".into(),
        message: "histogram needs `# n_meas=` metadata".into(),
    })?;
    let counts = (0..table.rows.len())
        .map(|i| table.u64_at(i, 1, "counts"))
        .collect::<Result<Vec<_>>>()?;
    let data = HistogramData::new(dt, counts, n_meas).map_err(|e| Error::Schema {
        line: 0,
        field: "n_meas".into(),
        message: e.to_string(),
    })?;
    Ok((data, table.metadata))
}

pub fn write_calibration_csv<W: Write>(out: W, cal: &CalibrationPair, metadata: &Metadata) -> Result<()> {
    let mut meta = metadata.clone();
    meta.insert("dt_ns".into(), cal.dt.to_string());
    if let Some(n) = cal.n_cal {
        meta.insert("n_cal".into(), n.to_string());
    }
    write_table_csv(
        out,
        &meta,
        &["t_start_ns", "m0", "m1"],
        cal.m0
            .iter()
            .zip(&cal.m1)
            .enumerate()
            .map(|(i, (a, b))| vec![t_start(i, cal.dt), a.to_string(), b.to_string()]),
    )
}

pub fn read_calibration_csv<R: Read>(input: R) -> Result<(CalibrationPair, Metadata)> {
    let table = read_csv(input, &["t_start_ns", "m0", "m1"])?;
    table.nonempty("m0")?;
    let dt = table.bin_width()?;
    let column = |col: usize, name: &str| {
        (0..table.rows.len())
            .map(|i| table.f64_at(i, col, name))
            .collect::<Result<Vec<_>>>()
    };
    let m0 = column(1, "m0")?;
    let m1 = column(2, "m1")?;
    let n_cal = table.meta::<u64>("n_cal")?;
    let cal = CalibrationPair::new(dt, m0, m1, n_cal).map_err(|e| Error::Schema {
        line: table.first_line(),
        field: "m0".into(),
        message: e.to_string(),
    })?;
    Ok((cal, table.metadata))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv,
    Json,
}

impl FileFormat {
    /// JSON for `.json`, CSV otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => FileFormat::Json,
            _ => FileFormat::Csv,
        }
    }
}

pub fn write_json<T: Serialize + ?Sized, W: Write>(mut out: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned, R: Read>(input: R) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(input))?)
}

/// Value plus its echoed configuration, the JSON counterpart of CSV
/// metadata comments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document<T> {
    #[serde(default)]
    pub metadata: Metadata,
    pub data: T,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn load_json<T: DeserializeOwned + Clone>(path: &Path) -> Result<(T, Metadata)> {
    let doc: Document<T> = read_json(open(path)?)?;
    Ok((doc.data, doc.metadata))
}

fn save_json<T: Serialize + Clone>(path: &Path, data: &T, metadata: &Metadata) -> Result<()> {
    let doc = Document { metadata: metadata.clone(), data: data.clone() };
    write_json(create(path)?, &doc)
}

pub fn save_trace(path: &Path, trace: &FluorescenceTrace, metadata: &Metadata) -> Result<()> {
    match FileFormat::from_path(path) {
        FileFormat::Csv => write_trace_csv(create(path)?, trace, metadata),
        FileFormat::Json => save_json(path, trace, metadata),
    }
}

pub fn load_trace(path: &Path) -> Result<(FluorescenceTrace, Metadata)> {
    match FileFormat::from_path(path) {
        FileFormat::Csv => read_trace_csv(open(path)?),
        FileFormat::Json => {
            let (t, m): (FluorescenceTrace, _) = load_json(path)?;
            t.validate()?;
            Ok((t, m))
        }
    }
}

pub fn save_histogram(path: &Path, data: &HistogramData, metadata: &Metadata) -> Result<()> {
    match FileFormat::from_path(path) {
        FileFormat::Csv => write_histogram_csv(create(path)?, data, metadata),
        FileFormat::Json => save_json(path, data, metadata),
    }
}

pub fn load_histogram(path: &Path) -> Result<(HistogramData, Metadata)> {
    match FileFormat::from_path(path) {
        FileFormat::Csv => read_histogram_csv(open(path)?),
        FileFormat::Json => {
            let (h, m): (HistogramData, _) = load_json(path)?;
            let h = HistogramData::new(h.dt, h.counts, h.n_meas)?;
            Ok((h, m))
        }
    }
}

pub fn save_calibration(path: &Path, cal: &CalibrationPair, metadata: &Metadata) -> Result<()> {
    match FileFormat::from_path(path) {
        FileFormat::Csv => write_calibration_csv(create(path)?, cal, metadata),
        FileFormat::Json => save_json(path, cal, metadata),
    }
}

pub fn load_calibration(path: &Path) -> Result<(CalibrationPair, Metadata)> {
    match FileFormat::from_path(path) {
        FileFormat::Csv => read_calibration_csv(open(path)?),
        FileFormat::Json => {
            let (c, m): (CalibrationPair, _) = load_json(path)?;
            c.validate()?;
            Ok((c, m))
        }
    }
}

/// Monte Carlo sweep, one row per point with mean, std and predicted std
/// columns for each method.
pub fn write_monte_carlo_csv<W: Write>(
    out: W,
    results: &[MonteCarloResult],
    metadata: &Metadata,
) -> Result<()> {
    let methods: Vec<Method> = results
        .first()
        .map(|r| r.stats.iter().map(|s| s.method).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = ["duration_ns", "p_flip", "s_z_true", "window_bins", "repetitions"]
        .map(String::from)
        .to_vec();
    for m in &methods {
        for col in ["mean", "std", "predicted_std"] {
            header.push(format!("{}_{col}", m.as_str()));
        }
    }
    let rows = results
        .iter()
        .map(|r| {
            let mut row = vec![
                r.duration_ns.map_or(String::new(), |d| d.to_string()),
                r.p_flip.to_string(),
                r.s_z_true.to_string(),
                r.window_bins.to_string(),
                r.stats.first().map_or(0, |s| s.repetitions).to_string(),
            ];
            for m in &methods {
                let s = r.get(*m).ok_or_else(|| {
                    Error::InvalidInput(format!("sweep point lacks method {m}"))
                })?;
                row.extend([s.mean.to_string(), s.std.to_string(), s.predicted_std.to_string()]);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table_csv(out, metadata, &header, rows.into_iter())
}

pub fn write_snr_csv<W: Write>(out: W, points: &[SnrPoint], metadata: &Metadata) -> Result<()> {
    write_table_csv(
        out,
        metadata,
        &[
            "intensity",
            "excitation_mhz",
            "snr_approx",
            "snr_photon_counting",
            "window_bins",
            "percent_gap",
        ],
        points.iter().map(|p| {
            vec![
                p.intensity.to_string(),
                p.excitation.to_string(),
                p.snr_approx.to_string(),
                p.snr_photon_counting.to_string(),
                p.window_bins.to_string(),
                p.percent_gap.to_string(),
            ]
        }),
    )
}

/// One dataset entry of a fit manifest. Trace paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDataset {
    #[serde(default)]
    pub label: Option<String>,
    pub intensity: f64,
    pub ms0: PathBuf,
    pub ms1: PathBuf,
    /// Falls back to `# n_averages=` in the ms0 trace file.
    #[serde(default)]
    pub n_averages: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitManifest {
    pub datasets: Vec<ManifestDataset>,
    pub constraints: Constraints,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default)]
    pub constraint_mode: ConstraintMode,
    #[serde(default)]
    pub background: bool,
    /// Starting rates; the default guess when absent.
    #[serde(default)]
    pub initial_guess: Option<crate::photophysics::RateModel>,
}

impl FitManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(open(path)?)
    }

    /// Reads every referenced trace.
    pub fn to_problem(&self, base: &Path) -> Result<FitProblem> {
        let datasets = self
            .datasets
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let (ms0, meta) = load_trace(&base.join(&d.ms0))?;
                let (ms1, _) = load_trace(&base.join(&d.ms1))?;
                let n_averages = match d.n_averages {
                    Some(n) => n,
                    None => meta
                        .get("n_averages")
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Schema {
                            line: 0,
                            field: format!("datasets[{k}].n_averages"),
                            message: "missing from manifest and trace metadata".into(),
                        })?,
                };
                Ok(Dataset {
                    label: d.label.clone().unwrap_or_else(|| format!("I={}", d.intensity)),
                    intensity: d.intensity,
                    ms0,
                    ms1,
                    n_averages,
                })
            })
            .collect::<Result<_>>()?;
        let problem = FitProblem {
            datasets,
            constraints: self.constraints,
            weighting: self.weighting,
            constraint_mode: self.constraint_mode,
            background: self.background,
        };
        problem.validate()?;
        Ok(problem)
    }
}

/// Lifetime constraints from values and uncertainties in ns.
pub fn lifetime_constraints(t0: f64, sigma0: f64, t1: f64, sigma1: f64) -> Constraints {
    Constraints {
        t0: LifetimeConstraint { value_ns: t0, sigma_ns: sigma0 },
        t1: LifetimeConstraint { value_ns: t1, sigma_ns: sigma1 },
    }
}

//! File formats.
//!
//! | file | layout |
//! |------|--------|
//! | events, text | CSV header `t_us,x,y,p`; `p` is `1` for on, `0` for off |
//! | events, binary | headerless 13-byte little-endian records: `t_us` u64, `x` u16, `y` u16, `p` u8 |
//! | ground truth | CSV `t_us,omega1,omega2,omega3,omega4,px,py,pz,vx,vy,vz,qw,qx,qy,qz` (rad/s, m, m/s, world-from-body quaternion) |
//! | observer | CSV `t_us,px,py,pz,qw,qx,qy,qz` (observer body pose in the world) |
//! | estimates | CSV, columns in [`ESTIMATE_COLUMNS`] |
//!
//! Text readers locate columns by header name, so extra columns are ignored
//! and a missing one is reported by name. Floats are written in Rust's
//! shortest round-trip form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::events::{Event, EventError, Polarity};
use crate::geometry::Pose;
use crate::pipeline::EstimateRecord;
use crate::sim::SimState;

pub const EVENT_RECORD_BYTES: usize = 13;
pub const EVENT_COLUMNS: [&str; 4] = ["t_us", "x", "y", "p"];
pub const GROUND_TRUTH_COLUMNS: [&str; 15] = [
    "t_us", "omega1", "omega2", "omega3", "omega4", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz",
];
pub const OBSERVER_COLUMNS: [&str; 8] = ["t_us", "px", "py", "pz", "qw", "qx", "qy", "qz"];
pub const ESTIMATE_COLUMNS: [&str; 25] = [
    "t_us",
    "rpm1",
    "rpm2",
    "rpm3",
    "rpm4",
    "valid1",
    "valid2",
    "valid3",
    "valid4",
    "px",
    "py",
    "pz",
    "vx",
    "vy",
    "vz",
    "bx",
    "by",
    "bz",
    "roll",
    "pitch",
    "position_valid",
    "attitude_valid",
    "position_rejected",
    "orientation_rejected",
    "live_tracks",
];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}: {msg}")]
    Csv { path: PathBuf, line: u64, msg: String },
    #[error("{path}: line {line}: column '{column}': cannot parse '{value}'")]
    Field {
        path: PathBuf,
        line: u64,
        column: &'static str,
        value: String,
    },
    #[error("{path}: missing column '{column}'")]
    MissingColumn { path: PathBuf, column: &'static str },
    #[error("{path}: byte offset {offset}: {msg}")]
    Binary { path: PathBuf, offset: u64, msg: String },
    #[error(transparent)]
    Events(#[from] EventError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    File::create(path).map(|f| BufWriter::with_capacity(1 << 20, f)).map_err(io_err(path))
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(|f| BufReader::with_capacity(1 << 20, f)).map_err(io_err(path))
}

/// Event file encoding, chosen by extension: `.bin` is binary, anything else CSV.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => Self::Binary,
            _ => Self::Csv,
        }
    }
}

pub struct EventWriter {
    out: BufWriter<File>,
    format: EventFormat,
    path: PathBuf,
}

impl EventWriter {
    pub fn create(path: &Path) -> Result<Self, IoError> {
        let format = EventFormat::from_path(path);
        let mut out = create(path)?;
        if format == EventFormat::Csv {
            writeln!(out, "{}", EVENT_COLUMNS.join(",")).map_err(io_err(path))?;
        }
        Ok(Self {
            out,
            format,
            path: path.to_path_buf(),
        })
    }

    pub fn write_all(&mut self, events: &[Event]) -> Result<(), IoError> {
        for e in events {
            let r = match self.format {
                EventFormat::Csv => writeln!(self.out, "{},{},{},{}", e.t, e.x, e.y, e.polarity.to_bit()),
                EventFormat::Binary => {
                    let mut rec = [0u8; EVENT_RECORD_BYTES];
                    rec[..8].copy_from_slice(&e.t.to_le_bytes());
                    rec[8..10].copy_from_slice(&e.x.to_le_bytes());
                    rec[10..12].copy_from_slice(&e.y.to_le_bytes());
                    rec[12] = e.polarity.to_bit();
                    self.out.write_all(&rec)
                }
            };
            r.map_err(io_err(&self.path))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), IoError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<(), IoError> {
    let mut w = EventWriter::create(path)?;
    w.write_all(events)?;
    w.finish()
}

fn column_indices<const N: usize>(headers: &csv::ByteRecord, required: &[&'static str; N], path: &Path) -> Result<[usize; N], IoError> {
    let mut idx = [0; N];
    for (k, name) in required.iter().enumerate() {
        idx[k] = headers.iter().position(|h| h == name.as_bytes()).ok_or_else(|| IoError::MissingColumn {
            path: path.to_path_buf(),
            column: name,
        })?;
    }
    Ok(idx)
}

/// Typed access to one CSV row.
struct Row<'a> {
    rec: &'a csv::ByteRecord,
    path: &'a Path,
    line: u64,
}

impl Row<'_> {
    fn parse<T: std::str::FromStr>(&self, i: usize, column: &'static str) -> Result<T, IoError> {
        let raw = self.rec.get(i).unwrap_or_default();
        std::str::from_utf8(raw)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| IoError::Field {
                path: self.path.to_path_buf(),
                line: self.line,
                column,
                value: String::from_utf8_lossy(raw).into_owned(),
            })
    }

    fn flag(&self, i: usize, column: &'static str) -> Result<bool, IoError> {
        Ok(self.parse::<u8>(i, column)? != 0)
    }
}

/// Streams the records of a CSV file with the required columns.
struct CsvRows<const N: usize> {
    rdr: csv::Reader<BufReader<File>>,
    rec: csv::ByteRecord,
    idx: [usize; N],
    names: [&'static str; N],
    path: PathBuf,
}

impl<const N: usize> CsvRows<N> {
    fn open(path: &Path, names: [&'static str; N]) -> Result<Self, IoError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(open(path)?);
        let headers = rdr.byte_headers().map_err(|e| csv_err(path, 1, e))?.clone();
        let idx = column_indices(&headers, &names, path)?;
        Ok(Self {
            rdr,
            rec: csv::ByteRecord::new(),
            idx,
            names,
            path: path.to_path_buf(),
        })
    }

    /// Next row mapped through `f`, which receives column positions in
    /// `names` order.
    fn next_with<T>(&mut self, f: impl FnOnce(&Row, &[usize; N], &[&'static str; N]) -> Result<T, IoError>) -> Option<Result<T, IoError>> {
        match self.rdr.read_byte_record(&mut self.rec) {
            Ok(false) => None,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                Some(Err(csv_err(&self.path, line, e)))
            }
            Ok(true) => {
                let line = self.rec.position().map_or(0, |p| p.line());
                let row = Row {
                    rec: &self.rec,
                    path: &self.path,
                    line,
                };
                Some(f(&row, &self.idx, &self.names))
            }
        }
    }
}

fn csv_err(path: &Path, line: u64, e: csv::Error) -> IoError {
    IoError::Csv {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

pub struct CsvEventReader(CsvRows<4>);

impl Iterator for CsvEventReader {
    type Item = Result<Event, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.0.next_with(|row, idx, names| {
            let bit: u8 = row.parse(idx[3], names[3])?;
            let polarity = Polarity::from_bit(bit).ok_or_else(|| IoError::Field {
                path: row.path.to_path_buf(),
                line: row.line,
                column: "p",
                value: bit.to_string(),
            })?;
            Ok(Event::new(row.parse(idx[0], names[0])?, row.parse(idx[1], names[1])?, row.parse(idx[2], names[2])?, polarity))
        })
    }
}

pub struct BinaryEventReader {
    r: BufReader<File>,
    offset: u64,
    path: PathBuf,
    done: bool,
}

impl Iterator for BinaryEventReader {
    type Item = Result<Event, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut rec = [0u8; EVENT_RECORD_BYTES];
        let mut filled = 0;
        while filled < EVENT_RECORD_BYTES {
            match self.r.read(&mut rec[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(io_err(&self.path)(e)));
                }
            }
        }
        let err = |offset, msg: String| {
            Some(Err(IoError::Binary {
                path: self.path.clone(),
                offset,
                msg,
            }))
        };
        if filled == 0 {
            self.done = true;
            return None;
        }
        if filled < EVENT_RECORD_BYTES {
            self.done = true;
            return err(self.offset, format!("truncated record ({filled} of {EVENT_RECORD_BYTES} bytes)"));
        }
        let Some(polarity) = Polarity::from_bit(rec[12]) else {
            self.done = true;
            return err(self.offset + 12, format!("polarity byte {} is not 0 or 1", rec[12]));
        };
        self.offset += EVENT_RECORD_BYTES as u64;
        Some(Ok(Event::new(
            u64::from_le_bytes(rec[..8].try_into().unwrap()),
            u16::from_le_bytes([rec[8], rec[9]]),
            u16::from_le_bytes([rec[10], rec[11]]),
            polarity,
        )))
    }
}

/// Streaming reader for either event encoding.
pub enum EventReader {
    Csv(CsvEventReader),
    Binary(BinaryEventReader),
}

impl EventReader {
    pub fn open(path: &Path) -> Result<Self, IoError> {
        Ok(match EventFormat::from_path(path) {
            EventFormat::Csv => Self::Csv(CsvEventReader(CsvRows::open(path, EVENT_COLUMNS)?)),
            EventFormat::Binary => Self::Binary(BinaryEventReader {
                r: open(path)?,
                offset: 0,
                path: path.to_path_buf(),
                done: false,
            }),
        })
    }
}

impl Iterator for EventReader {
    type Item = Result<Event, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            Self::Csv(r) => r.next(),
            Self::Binary(r) => r.next(),
        }
    }
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, IoError> {
    EventReader::open(path)?.collect()
}

fn fmt_f(out: &mut String, v: f64) {
    use std::fmt::Write as _;
    let _ = write!(out, ",{v}");
}

/// Writes CSV rows built by `f`, one per item, under `header`.
fn write_rows<T>(path: &Path, header: &[&str], items: impl IntoIterator<Item = T>, mut f: impl FnMut(&T, &mut String)) -> Result<(), IoError> {
    let mut out = create(path)?;
    writeln!(out, "{}", header.join(",")).map_err(io_err(path))?;
    let mut line = String::new();
    for item in items {
        line.clear();
        f(&item, &mut line);
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn quat_row(out: &mut String, q: &UnitQuaternion<f64>) {
    for v in [q.w, q.i, q.j, q.k] {
        fmt_f(out, v);
    }
}

pub fn write_ground_truth(path: &Path, states: &[SimState]) -> Result<(), IoError> {
    write_rows(path, &GROUND_TRUTH_COLUMNS, states, |s, out| {
        out.push_str(&s.t_us.to_string());
        for v in s.motor_omega.iter().chain(s.p.iter()).chain(s.v.iter()) {
            fmt_f(out, *v);
        }
        quat_row(out, &s.q);
    })
}

pub fn write_observer(path: &Path, poses: &[(u64, Pose)]) -> Result<(), IoError> {
    write_rows(path, &OBSERVER_COLUMNS, poses, |(t, p), out| {
        out.push_str(&t.to_string());
        for v in p.position.iter() {
            fmt_f(out, *v);
        }
        quat_row(out, &p.orientation);
    })
}

fn quat(row: &Row, idx: &[usize], names: &[&'static str]) -> Result<UnitQuaternion<f64>, IoError> {
    let q: Quaternion<f64> = Quaternion::new(
        row.parse(idx[0], names[0])?,
        row.parse(idx[1], names[1])?,
        row.parse(idx[2], names[2])?,
        row.parse(idx[3], names[3])?,
    );
    if !(q.norm() > 0.5) {
        return Err(IoError::Field {
            path: row.path.to_path_buf(),
            line: row.line,
            column: names[0],
            value: format!("quaternion norm {}", q.norm()),
        });
    }
    // values written from unit quaternions come back bit-exact
    if (q.norm() - 1.0).abs() <= 1e-12 {
        Ok(UnitQuaternion::new_unchecked(q))
    } else {
        Ok(UnitQuaternion::new_normalize(q))
    }
}

fn vec3(row: &Row, idx: &[usize], names: &[&'static str]) -> Result<Vector3<f64>, IoError> {
    Ok(Vector3::new(row.parse(idx[0], names[0])?, row.parse(idx[1], names[1])?, row.parse(idx[2], names[2])?))
}

fn collect_rows<const N: usize, T>(
    path: &Path,
    names: [&'static str; N],
    f: impl Fn(&Row, &[usize; N], &[&'static str; N]) -> Result<T, IoError>,
) -> Result<Vec<T>, IoError> {
    let mut rows = CsvRows::open(path, names)?;
    let mut out = Vec::new();
    while let Some(r) = rows.next_with(&f) {
        out.push(r?);
    }
    Ok(out)
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<SimState>, IoError> {
    collect_rows(path, GROUND_TRUTH_COLUMNS, |row, i, n| {
        Ok(SimState {
            t_us: row.parse(i[0], n[0])?,
            motor_omega: [row.parse(i[1], n[1])?, row.parse(i[2], n[2])?, row.parse(i[3], n[3])?, row.parse(i[4], n[4])?],
            p: vec3(row, &i[5..8], &n[5..8])?,
            v: vec3(row, &i[8..11], &n[8..11])?,
            q: quat(row, &i[11..15], &n[11..15])?,
            omega_body: Vector3::zeros(),
        })
    })
}

pub fn read_observer(path: &Path) -> Result<Vec<(u64, Pose)>, IoError> {
    collect_rows(path, OBSERVER_COLUMNS, |row, i, n| {
        Ok((row.parse(i[0], n[0])?, Pose::new(vec3(row, &i[1..4], &n[1..4])?, quat(row, &i[4..8], &n[4..8])?)))
    })
}

pub struct EstimateWriter {
    out: BufWriter<File>,
    path: PathBuf,
    line: String,
}

impl EstimateWriter {
    pub fn create(path: &Path) -> Result<Self, IoError> {
        let mut out = create(path)?;
        writeln!(out, "{}", ESTIMATE_COLUMNS.join(",")).map_err(io_err(path))?;
        Ok(Self {
            out,
            path: path.to_path_buf(),
            line: String::new(),
        })
    }

    pub fn write(&mut self, r: &EstimateRecord) -> Result<(), IoError> {
        let s = &mut self.line;
        s.clear();
        s.push_str(&r.t_us.to_string());
        for v in r.rpm {
            fmt_f(s, v);
        }
        for v in r.rpm_valid {
            s.push_str(if v { ",1" } else { ",0" });
        }
        for v in r.position.iter().chain(r.velocity.iter()).chain(r.b_z.iter()) {
            fmt_f(s, *v);
        }
        fmt_f(s, r.roll);
        fmt_f(s, r.pitch);
        for v in [r.position_valid, r.attitude_valid, r.position_rejected, r.orientation_rejected] {
            s.push_str(if v { ",1" } else { ",0" });
        }
        s.push(',');
        s.push_str(&r.live_tracks.to_string());
        s.push('\n');
        self.out.write_all(s.as_bytes()).map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<(), IoError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn write_estimates(path: &Path, records: &[EstimateRecord]) -> Result<(), IoError> {
    let mut w = EstimateWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

pub fn read_estimates(path: &Path) -> Result<Vec<EstimateRecord>, IoError> {
    collect_rows(path, ESTIMATE_COLUMNS, |row, i, n| {
        Ok(EstimateRecord {
            t_us: row.parse(i[0], n[0])?,
            rpm: [row.parse(i[1], n[1])?, row.parse(i[2], n[2])?, row.parse(i[3], n[3])?, row.parse(i[4], n[4])?],
            rpm_valid: [row.flag(i[5], n[5])?, row.flag(i[6], n[6])?, row.flag(i[7], n[7])?, row.flag(i[8], n[8])?],
            position: vec3(row, &i[9..12], &n[9..12])?,
            velocity: vec3(row, &i[12..15], &n[12..15])?,
            b_z: vec3(row, &i[15..18], &n[15..18])?,
            roll: row.parse(i[18], n[18])?,
            pitch: row.parse(i[19], n[19])?,
            position_valid: row.flag(i[20], n[20])?,
            attitude_valid: row.flag(i[21], n[21])?,
            position_rejected: row.flag(i[22], n[22])?,
            orientation_rejected: row.flag(i[23], n[23])?,
            live_tracks: row.parse(i[24], n[24])?,
        })
    })
}

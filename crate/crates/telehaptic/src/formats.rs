//! On-disk formats: TSDF dumps, PLY point clouds, 16-bit label PNGs, CSV
//! traces, JSON grids, paths and scenes, and recorded sessions.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use telehaptic_core::control::{RunMetrics, Stats};
use telehaptic_core::geometry::{Vec2, Vec3};
use telehaptic_core::haptic::TraceRow;
use telehaptic_core::plan::{Cell, GridSpec, OccupancyGrid, PathPlan};
use telehaptic_core::segment::LabelImage;
use telehaptic_core::sim::{OdometryRecord, Scene, SessionLog};
use telehaptic_core::tsdf::{SurfacePoint, TsdfParams, TsdfVolume, Voxel};

use crate::wire::{decode_frame_prefix, write_frame, WireError};

pub const TSDF_MAGIC: [u8; 4] = *b"TSDF";
pub const TSDF_VERSION: u32 = 1;
/// Bytes per voxel record: f32 tsdf, u8 weight, 3×u8 color, u16 label, u16 label weight.
pub const TSDF_VOXEL_LEN: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad file: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    PngDecode(#[from] png::DecodingError),
    #[error(transparent)]
    PngEncode(#[from] png::EncodingError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// TSDF dump, little-endian:
/// `TSDF`, u32 version, u32 resolution, f64 voxel size, f64 truncation,
/// u8 max weight, 3×f64 origin, then one record per voxel in index order.
pub fn write_tsdf<W: Write>(vol: &TsdfVolume, w: W) -> io::Result<()> {
    let mut w = BufWriter::new(w);
    let p = vol.params();
    w.write_all(&TSDF_MAGIC)?;
    w.write_all(&TSDF_VERSION.to_le_bytes())?;
    w.write_all(&(p.resolution as u32).to_le_bytes())?;
    w.write_all(&p.voxel_size.to_le_bytes())?;
    w.write_all(&p.truncation.to_le_bytes())?;
    w.write_all(&[p.max_weight])?;
    for k in 0..3 {
        w.write_all(&vol.origin()[k].to_le_bytes())?;
    }
    for idx in 0..vol.voxel_count() {
        let v = vol.voxel(idx);
        let mut rec = [0u8; TSDF_VOXEL_LEN];
        rec[0..4].copy_from_slice(&v.tsdf.to_le_bytes());
        rec[4] = v.weight;
        rec[5..8].copy_from_slice(&v.color);
        rec[8..10].copy_from_slice(&v.label.to_le_bytes());
        rec[10..12].copy_from_slice(&v.label_weight.to_le_bytes());
        w.write_all(&rec)?;
    }
    w.flush()
}

pub fn read_tsdf<R: Read>(r: R) -> Result<TsdfVolume, FormatError> {
    let mut r = BufReader::new(r);
    let mut head = [0u8; 4 + 4 + 4 + 8 + 8 + 1 + 24];
    r.read_exact(&mut head).map_err(|_| FormatError::Malformed("truncated tsdf header"))?;
    if head[..4] != TSDF_MAGIC {
        return Err(FormatError::Malformed("bad tsdf magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().expect("4 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(head[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(4) != TSDF_VERSION {
        return Err(FormatError::Malformed("unsupported tsdf version"));
    }
    let params = TsdfParams {
        resolution: u32_at(8) as usize,
        voxel_size: f64_at(12),
        truncation: f64_at(20),
        max_weight: head[28],
    };
    let origin = Vec3::new(f64_at(29), f64_at(37), f64_at(45));
    let n = params
        .resolution
        .checked_pow(3)
        .ok_or(FormatError::Malformed("resolution overflow"))?;
    let mut body = vec![0u8; n * TSDF_VOXEL_LEN];
    r.read_exact(&mut body).map_err(|_| FormatError::Malformed("truncated voxels"))?;
    let voxels = body.chunks_exact(TSDF_VOXEL_LEN).map(|c| Voxel {
        tsdf: f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
        weight: c[4],
        color: [c[5], c[6], c[7]],
        label: u16::from_le_bytes([c[8], c[9]]),
        label_weight: u16::from_le_bytes([c[10], c[11]]),
    });
    TsdfVolume::from_parts(params, origin, voxels).map_err(|_| FormatError::Malformed("invalid tsdf parameters"))
}

/// Binary little-endian PLY with position, color and label per vertex.
pub fn write_ply<W: Write>(points: &[SurfacePoint], w: W) -> io::Result<()> {
    let mut w = BufWriter::new(w);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property ushort label\nend_header\n",
        points.len()
    )?;
    for p in points {
        for k in 0..3 {
            w.write_all(&(p.position[k] as f32).to_le_bytes())?;
        }
        w.write_all(&p.color)?;
        w.write_all(&p.label.to_le_bytes())?;
    }
    w.flush()
}

/// Reads back a PLY written by [`write_ply`].
pub fn read_ply<R: Read>(r: R) -> Result<Vec<SurfacePoint>, FormatError> {
    let mut r = BufReader::new(r);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or(FormatError::Malformed("missing ply header end"))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| FormatError::Malformed("ply header not utf-8"))?;
    if !header.starts_with("ply\nformat binary_little_endian 1.0\n") {
        return Err(FormatError::Malformed("unsupported ply format"));
    }
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or(FormatError::Malformed("missing vertex count"))?;
    let body = &bytes[end..];
    const REC: usize = 17;
    if body.len() != count * REC {
        return Err(FormatError::Malformed("ply body length"));
    }
    Ok(body
        .chunks_exact(REC)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64;
            SurfacePoint {
                position: Vec3::new(f(0), f(4), f(8)),
                color: [c[12], c[13], c[14]],
                label: u16::from_le_bytes([c[15], c[16]]),
            }
        })
        .collect())
}

/// 16-bit grayscale PNG of a label image.
pub fn write_label_png<W: Write>(img: &LabelImage, w: W) -> Result<(), FormatError> {
    let mut enc = png::Encoder::new(BufWriter::new(w), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header()?;
    let data: Vec<u8> = img.labels.iter().flat_map(|l| l.to_be_bytes()).collect();
    writer.write_image_data(&data)?;
    writer.finish()?;
    Ok(())
}

pub fn read_label_png<R: Read + io::BufRead + io::Seek>(r: R) -> Result<LabelImage, FormatError> {
    let dec = png::Decoder::new(r);
    let mut reader = dec.read_info()?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(FormatError::Malformed("label png must be 16-bit grayscale"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or(FormatError::Malformed("png too large"))?];
    let frame = reader.next_frame(&mut buf)?;
    let labels = buf[..frame.buffer_size()].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok(LabelImage {
        width: w,
        height: h,
        labels,
    })
}

/// One haptic trace row in CSV form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub timestamp_ms: u64,
    pub hx: f64,
    pub hy: f64,
    pub hz: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
    pub mode: String,
    pub friction_mode: String,
}

impl From<&TraceRow> for TraceRecord {
    fn from(r: &TraceRow) -> Self {
        Self {
            timestamp_ms: r.timestamp_ms,
            hx: r.hip.x,
            hy: r.hip.y,
            hz: r.hip.z,
            px: r.proxy.x,
            py: r.proxy.y,
            pz: r.proxy.z,
            fx: r.force.x,
            fy: r.force.y,
            fz: r.force.z,
            mode: r.mode.as_str().to_string(),
            friction_mode: r.friction_mode.as_str().to_string(),
        }
    }
}

impl TraceRecord {
    pub fn hip(&self) -> Vec3 {
        Vec3::new(self.hx, self.hy, self.hz)
    }

    pub fn proxy(&self) -> Vec3 {
        Vec3::new(self.px, self.py, self.pz)
    }
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<(), FormatError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>, R: Read>(r: R) -> Result<Vec<T>, FormatError> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|r| r.map_err(FormatError::from)).collect()
}

pub fn write_trace<W: Write>(rows: &[TraceRow], w: W) -> Result<(), FormatError> {
    let recs: Vec<TraceRecord> = rows.iter().map(TraceRecord::from).collect();
    write_csv(&recs, w)
}

/// Latency-compensation series: the robot's true x when the command lands,
/// the compensated prediction, and the zero-order-hold baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub t_ms: u64,
    pub actual_x: f64,
    pub predicted_x: f64,
    pub hold_x: f64,
}

/// One `name,count,mean,std,max,min` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatRecord {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub min: f64,
}

impl StatRecord {
    pub fn new(name: &str, s: &Stats) -> Self {
        Self {
            name: name.to_string(),
            count: s.count,
            mean: s.mean,
            std: s.std,
            max: s.max,
            min: s.min,
        }
    }

    pub fn scalar(name: &str, v: f64) -> Self {
        Self {
            name: name.to_string(),
            count: 1,
            mean: v,
            std: 0.0,
            max: v,
            min: v,
        }
    }
}

/// Deterministic metrics rows: execution time, path length and completion.
pub fn metric_records(m: &RunMetrics) -> Vec<StatRecord> {
    vec![
        StatRecord::scalar("te_s", m.te),
        StatRecord::scalar("lp_m", m.lp),
        StatRecord::scalar("complete", if m.complete { 1.0 } else { 0.0 }),
    ]
}

/// Wall-clock timing rows; these vary between runs.
pub fn timing_records(m: &RunMetrics) -> Vec<StatRecord> {
    let mut out = Vec::new();
    if let Some(tp) = &m.tp {
        out.push(StatRecord::new("tp_s", tp));
    }
    if let Some(tr) = &m.tr {
        out.push(StatRecord::new("tr_s", tr));
    }
    out
}

/// Occupancy grid with run-length encoded cells: `[[state, count], ...]`,
/// state 0 free, 1 occupied, 2 unknown. Inflation is recomputed on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    pub inflation: f64,
    pub cells: Vec<[u32; 2]>,
}

fn cell_code(c: Cell) -> u32 {
    match c {
        Cell::Free => 0,
        Cell::Occupied => 1,
        Cell::Unknown => 2,
    }
}

impl GridFile {
    pub fn from_grid(g: &OccupancyGrid) -> Self {
        let mut cells: Vec<[u32; 2]> = Vec::new();
        for &c in &g.cells {
            let code = cell_code(c);
            match cells.last_mut() {
                Some(run) if run[0] == code => run[1] += 1,
                _ => cells.push([code, 1]),
            }
        }
        Self {
            origin: [g.spec.origin.x, g.spec.origin.y],
            cell_size: g.spec.cell_size,
            width: g.spec.width,
            height: g.spec.height,
            inflation: g.spec.inflation,
            cells,
        }
    }

    pub fn to_grid(&self) -> Result<OccupancyGrid, FormatError> {
        let spec = GridSpec {
            origin: Vec2::new(self.origin[0], self.origin[1]),
            cell_size: self.cell_size,
            width: self.width,
            height: self.height,
            inflation: self.inflation,
        };
        let mut g = OccupancyGrid::new(spec);
        let mut i = 0usize;
        for &[code, count] in &self.cells {
            let c = match code {
                0 => Cell::Free,
                1 => Cell::Occupied,
                2 => Cell::Unknown,
                _ => return Err(FormatError::Malformed("unknown cell state")),
            };
            let end = i + count as usize;
            if end > g.cells.len() {
                return Err(FormatError::Malformed("cell runs exceed grid"));
            }
            g.cells[i..end].iter_mut().for_each(|x| *x = c);
            i = end;
        }
        if i != g.cells.len() {
            return Err(FormatError::Malformed("cell runs do not cover grid"));
        }
        g.inflate();
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathFile {
    pub waypoints: Vec<[f64; 2]>,
    pub cost: f64,
}

impl From<&PathPlan> for PathFile {
    fn from(p: &PathPlan) -> Self {
        Self {
            waypoints: p.waypoints.iter().map(|w| [w.x, w.y]).collect(),
            cost: p.cost,
        }
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene, FormatError> {
    let scene: Scene = read_json(path)?;
    if !scene.validate() {
        return Err(FormatError::Malformed("scene primitives outside bounds"));
    }
    Ok(scene)
}

/// Sidecar path for a session's odometry: `<frames>.odometry.json`.
pub fn odometry_sidecar(frames: &Path) -> PathBuf {
    let mut s = frames.as_os_str().to_owned();
    s.push(".odometry.json");
    PathBuf::from(s)
}

/// Writes concatenated frame messages and the odometry sidecar.
pub fn write_session(log: &SessionLog, frames: &Path) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(frames)?);
    let mut buf = Vec::new();
    for f in &log.frames {
        buf.clear();
        write_frame(f, &mut buf);
        w.write_all(&buf)?;
    }
    w.flush()?;
    write_json(&log.odometry, &odometry_sidecar(frames))
}

pub fn read_session(frames: &Path) -> Result<SessionLog, FormatError> {
    let mut bytes = Vec::new();
    File::open(frames)?.read_to_end(&mut bytes)?;
    let mut log = SessionLog::default();
    let mut at = 0;
    while at < bytes.len() {
        let (f, used) = decode_frame_prefix(&bytes[at..])?;
        log.frames.push(f);
        at += used;
    }
    let sidecar = odometry_sidecar(frames);
    if sidecar.exists() {
        log.odometry = read_json::<Vec<OdometryRecord>>(&sidecar)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rle_runs() {
        let mut g = OccupancyGrid::empty(GridSpec::centered(Vec2::zeros(), 4, 0.5, 0.0));
        g.cells[5] = Cell::Occupied;
        g.cells[6] = Cell::Occupied;
        g.cells[15] = Cell::Unknown;
        let f = GridFile::from_grid(&g);
        assert_eq!(f.cells, vec![[0, 5], [1, 2], [0, 8], [2, 1]]);
        let mut back = f.to_grid().unwrap();
        g.inflate();
        back.inflate();
        assert_eq!(back, g);
    }
}

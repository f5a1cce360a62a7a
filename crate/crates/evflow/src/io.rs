//! File formats: text and binary event streams, ground-truth flow, IWE
//! dumps, and the on-disk dataset layout.
//!
//! - Text events: one `t x y p` line per event (`t` seconds, `p` 1 or -1),
//!   `#` starts a comment.
//! - Binary events (`EVT1`): magic, `u16` H, `u16` W, then little-endian
//!   records of `f64 t, u16 x, u16 y, i8 p`.
//! - Flow (`FLO1`): magic, `u16` H, `u16` W, `H*W*2` `f32` (u then v per
//!   pixel), then `H*W` `u8` validity mask.
//! - IWE dump (`IWE1`): magic, `u16` H, `u16` W, `u8` kind (0 plain count,
//!   1 average timestamp, 2 exponential count), positive grid then negative
//!   grid as `f32`.
//!
//! A dataset directory holds one subdirectory per sequence, each with
//! `events.evt`, `meta.txt` (`interval = ...`, `volumes = ...`) and
//! `gt_NNNN.flo` per volume.

use crate::error::{Error, Result};
use crate::event::{Event, Polarity, SensorSize};
use crate::motion::{FlowField, Iwe, IweKind};
use crate::synth::GroundTruthFlow;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub fn write_events_text(path: &Path, events: &[Event]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# t x y p")?;
    for e in events {
        writeln!(w, "{} {} {} {}", e.t, e.x, e.y, e.p.value())?;
    }
    Ok(())
}

pub fn read_events_text(path: &Path) -> Result<Vec<Event>> {
    let r = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "line {}: expected `t x y p`, got {} fields",
                lineno + 1,
                fields.len()
            )));
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|e| Error::Format(format!("line {}: bad t: {e}", lineno + 1)))?;
        let x: u16 = fields[1]
            .parse()
            .map_err(|e| Error::Format(format!("line {}: bad x: {e}", lineno + 1)))?;
        let y: u16 = fields[2]
            .parse()
            .map_err(|e| Error::Format(format!("line {}: bad y: {e}", lineno + 1)))?;
        let p: i8 = fields[3]
            .parse()
            .map_err(|e| Error::Format(format!("line {}: bad p: {e}", lineno + 1)))?;
        let p = Polarity::from_value(p)
            .ok_or_else(|| Error::Format(format!("line {}: polarity must be 1 or -1", lineno + 1)))?;
        events.push(Event { x, y, t, p });
    }
    Ok(events)
}

pub fn write_events_binary(path: &Path, sensor: SensorSize, events: &[Event]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"EVT1")?;
    w.write_u16::<LittleEndian>(sensor.h as u16)?;
    w.write_u16::<LittleEndian>(sensor.w as u16)?;
    for e in events {
        w.write_f64::<LittleEndian>(e.t)?;
        w.write_u16::<LittleEndian>(e.x)?;
        w.write_u16::<LittleEndian>(e.y)?;
        w.write_i8(e.p.value())?;
    }
    Ok(())
}

pub fn read_events_binary(path: &Path) -> Result<(SensorSize, Vec<Event>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"EVT1" {
        return Err(Error::Format("bad event-file magic".to_string()));
    }
    let h = r.read_u16::<LittleEndian>()? as usize;
    let w = r.read_u16::<LittleEndian>()? as usize;
    let mut events = Vec::new();
    loop {
        let t = match r.read_f64::<LittleEndian>() {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let x = r.read_u16::<LittleEndian>()?;
        let y = r.read_u16::<LittleEndian>()?;
        let p = r.read_i8()?;
        let p = Polarity::from_value(p)
            .ok_or_else(|| Error::Format("polarity must be 1 or -1".to_string()))?;
        events.push(Event { x, y, t, p });
    }
    Ok((SensorSize::new(h, w), events))
}

pub fn write_flow(path: &Path, gt: &GroundTruthFlow) -> Result<()> {
    let (_, h, w) = gt.flow.data.dim();
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(b"FLO1")?;
    f.write_u16::<LittleEndian>(h as u16)?;
    f.write_u16::<LittleEndian>(w as u16)?;
    for y in 0..h {
        for x in 0..w {
            f.write_f32::<LittleEndian>(gt.flow.data[[0, y, x]] as f32)?;
            f.write_f32::<LittleEndian>(gt.flow.data[[1, y, x]] as f32)?;
        }
    }
    for y in 0..h {
        for x in 0..w {
            f.write_u8(u8::from(gt.valid[[y, x]]))?;
        }
    }
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<GroundTruthFlow> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"FLO1" {
        return Err(Error::Format("bad flow-file magic".to_string()));
    }
    let h = r.read_u16::<LittleEndian>()? as usize;
    let w = r.read_u16::<LittleEndian>()? as usize;
    let mut flow = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            flow.data[[0, y, x]] = r.read_f32::<LittleEndian>()? as f64;
            flow.data[[1, y, x]] = r.read_f32::<LittleEndian>()? as f64;
        }
    }
    let mut valid = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            valid[[y, x]] = r.read_u8()? != 0;
        }
    }
    Ok(GroundTruthFlow { flow, valid })
}

pub fn write_iwe(path: &Path, iwe: &Iwe) -> Result<()> {
    let (h, w) = iwe.pos.dim();
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(b"IWE1")?;
    f.write_u16::<LittleEndian>(h as u16)?;
    f.write_u16::<LittleEndian>(w as u16)?;
    f.write_u8(match iwe.kind {
        IweKind::PlainCount => 0,
        IweKind::AvgTimestamp => 1,
        IweKind::ExpCount => 2,
    })?;
    for grid in [&iwe.pos, &iwe.neg] {
        for v in grid.iter() {
            f.write_f32::<LittleEndian>(*v as f32)?;
        }
    }
    Ok(())
}

pub fn read_iwe(path: &Path) -> Result<Iwe> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"IWE1" {
        return Err(Error::Format("bad iwe-file magic".to_string()));
    }
    let h = r.read_u16::<LittleEndian>()? as usize;
    let w = r.read_u16::<LittleEndian>()? as usize;
    let kind = match r.read_u8()? {
        0 => IweKind::PlainCount,
        1 => IweKind::AvgTimestamp,
        2 => IweKind::ExpCount,
        k => return Err(Error::Format(format!("unknown iwe kind {k}"))),
    };
    let mut read_grid = || -> Result<Array2<f64>> {
        let mut g = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                g[[y, x]] = r.read_f32::<LittleEndian>()? as f64;
            }
        }
        Ok(g)
    };
    let pos = read_grid()?;
    let neg = read_grid()?;
    Ok(Iwe { pos, neg, kind })
}

/// One stored sequence: its events plus per-volume ground truth.
#[derive(Debug, Clone)]
pub struct StoredSequence {
    pub sensor: SensorSize,
    pub events: Vec<Event>,
    pub interval: f64,
    pub gts: Vec<GroundTruthFlow>,
}

/// Write a sequence directory (`events.evt`, `meta.txt`, `gt_NNNN.flo`).
pub fn write_sequence_dir(dir: &Path, seq: &StoredSequence) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_events_binary(&dir.join("events.evt"), seq.sensor, &seq.events)?;
    let mut meta = BufWriter::new(File::create(dir.join("meta.txt"))?);
    writeln!(meta, "interval = {}", seq.interval)?;
    writeln!(meta, "volumes = {}", seq.gts.len())?;
    for (k, gt) in seq.gts.iter().enumerate() {
        write_flow(&dir.join(format!("gt_{k:04}.flo")), gt)?;
    }
    Ok(())
}

/// Read a sequence directory written by [`write_sequence_dir`].
pub fn read_sequence_dir(dir: &Path) -> Result<StoredSequence> {
    let (sensor, events) = read_events_binary(&dir.join("events.evt"))?;
    let meta = crate::config::KvMap::load(&dir.join("meta.txt"))?;
    let interval: f64 = meta.require("interval")?;
    let volumes: usize = meta.require("volumes")?;
    let mut gts = Vec::with_capacity(volumes);
    for k in 0..volumes {
        gts.push(read_flow(&dir.join(format!("gt_{k:04}.flo")))?);
    }
    Ok(StoredSequence {
        sensor,
        events,
        interval,
        gts,
    })
}

/// List sequence subdirectories of a dataset directory, sorted by name.
pub fn list_sequence_dirs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("events.evt").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Format(format!(
            "no sequence directories under {}",
            dir.display()
        )));
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_events() -> Vec<Event> {
        vec![
            Event {
                x: 3,
                y: 5,
                t: 0.125,
                p: Polarity::Pos,
            },
            Event {
                x: 10,
                y: 0,
                t: 0.5,
                p: Polarity::Neg,
            },
        ]
    }

    #[test]
    fn text_round_trip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.txt");
        let events = sample_events();
        write_events_text(&path, &events).unwrap();
        let back = read_events_text(&path).unwrap();
        assert_eq!(back, events);
    }

    #[test]
    fn text_rejects_bad_polarity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.txt");
        std::fs::write(&path, "0.5 1 1 0\n").unwrap();
        assert!(matches!(
            read_events_text(&path).unwrap_err(),
            Error::Format(_)
        ));
    }

    #[test]
    fn binary_round_trip_preserves_sensor_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.evt");
        let events = sample_events();
        write_events_binary(&path, SensorSize::new(16, 24), &events).unwrap();
        let (sensor, back) = read_events_binary(&path).unwrap();
        assert_eq!(sensor, SensorSize::new(16, 24));
        assert_eq!(back, events);
    }

    #[test]
    fn flow_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.flo");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // f32-representable values survive the round trip exactly.
        let flow = FlowField::from_array(Array3::from_shape_fn((2, 5, 7), |_| {
            (rng.gen_range(-8i32..8) as f64) * 0.25
        }));
        let valid = Array2::from_shape_fn((5, 7), |(y, x)| (x + y) % 3 == 0);
        let gt = GroundTruthFlow {
            flow: flow.clone(),
            valid: valid.clone(),
        };
        write_flow(&path, &gt).unwrap();
        let back = read_flow(&path).unwrap();
        assert_eq!(back.flow, flow);
        assert_eq!(back.valid, valid);
    }

    #[test]
    fn iwe_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.iwe");
        let iwe = Iwe {
            pos: Array2::from_shape_fn((3, 4), |(y, x)| (y * 4 + x) as f64 * 0.5),
            neg: Array2::from_shape_fn((3, 4), |(y, x)| (y + x) as f64),
            kind: IweKind::AvgTimestamp,
        };
        write_iwe(&path, &iwe).unwrap();
        let back = read_iwe(&path).unwrap();
        assert_eq!(back.kind, IweKind::AvgTimestamp);
        assert_eq!(back.pos, iwe.pos);
        assert_eq!(back.neg, iwe.neg);
    }

    #[test]
    fn sequence_dir_round_trip() {
        use crate::event::SensorSize;
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("seq_000");
        let gt = GroundTruthFlow {
            flow: FlowField::uniform(4, 4, 1.5, -0.5),
            valid: Array2::from_elem((4, 4), true),
        };
        let seq = StoredSequence {
            sensor: SensorSize::new(4, 4),
            events: sample_events(),
            interval: 0.05,
            gts: vec![gt],
        };
        write_sequence_dir(&seq_dir, &seq).unwrap();
        let back = read_sequence_dir(&seq_dir).unwrap();
        assert_eq!(back.events, seq.events);
        assert_eq!(back.interval, 0.05);
        assert_eq!(back.gts.len(), 1);
        let dirs = list_sequence_dirs(dir.path()).unwrap();
        assert_eq!(dirs, vec![seq_dir]);
    }
}

//! Little-endian "PEVT" event files, "PNRM" normal maps and "PIMG" images.

use std::io::{Read, Write};

use super::{Event, EventStream};
use crate::binio::*;
use crate::error::{Error, Result};
use crate::normal_map::{Image, NormalMap};

const PEVT: &[u8; 4] = b"PEVT";
const PNRM: &[u8; 4] = b"PNRM";
const PIMG: &[u8; 4] = b"PIMG";
const PEVT_VERSION: u32 = 1;

pub fn write_events<W: Write>(w: &mut W, stream: &EventStream) -> Result<()> {
    write_magic(w, PEVT)?;
    write_u32(w, PEVT_VERSION)?;
    write_u32(w, stream.width as u32)?;
    write_u32(w, stream.height as u32)?;
    write_u64(w, stream.len() as u64)?;
    let mut buf = Vec::with_capacity(stream.len() * 16);
    for e in stream.events() {
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.p as u8);
        buf.extend_from_slice(&[0, 0, 0]);
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a PEVT file. The format carries no time window, so the caller supplies
/// `(t0, duration)`; `None` uses `t0 = 0` and ends the window at the last event.
pub fn read_events<R: Read>(r: &mut R, window: Option<(u64, u64)>) -> Result<EventStream> {
    read_magic(r, PEVT)?;
    let version = read_u32(r)?;
    if version != PEVT_VERSION {
        return Err(Error::Format(format!("unsupported PEVT version {version}")));
    }
    let width = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let count = read_u64(r)? as usize;
    let mut bytes = vec![0u8; count * 16];
    r.read_exact(&mut bytes)?;
    let events = bytes
        .chunks_exact(16)
        .map(|c| Event {
            t: u64::from_le_bytes(c[0..8].try_into().expect("8 bytes")),
            x: u16::from_le_bytes([c[8], c[9]]),
            y: u16::from_le_bytes([c[10], c[11]]),
            p: c[12] as i8,
        })
        .collect::<Vec<_>>();
    let (t0, duration) = window.unwrap_or((0, events.last().map_or(0, |e| e.t)));
    EventStream::new(width, height, t0, duration, events).map_err(|e| Error::Format(e.to_string()))
}

/// Invalid pixels are written as `(0, 0, 0)`.
pub fn write_normals<W: Write>(w: &mut W, map: &NormalMap) -> Result<()> {
    write_magic(w, PNRM)?;
    write_u32(w, map.width as u32)?;
    write_u32(w, map.height as u32)?;
    let mut interleaved = Vec::with_capacity(3 * map.pixels());
    for p in 0..map.pixels() {
        let n = if map.mask[p] { map.at(p) } else { [0.0; 3] };
        interleaved.extend_from_slice(&n);
    }
    write_f32_slice(w, &interleaved)
}

/// Pixels whose stored vector has norm below 0.5 are marked invalid.
pub fn read_normals<R: Read>(r: &mut R) -> Result<NormalMap> {
    read_magic(r, PNRM)?;
    let width = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let hw = width * height;
    let interleaved = read_f32_vec(r, 3 * hw)?;
    let mut map = NormalMap::constant(width, height, [0.0; 3]);
    for (p, n) in interleaved.chunks_exact(3).enumerate() {
        let norm2 = n[0] * n[0] + n[1] * n[1] + n[2] * n[2];
        map.mask[p] = norm2 > 0.25;
        map.set(p, [n[0], n[1], n[2]]);
    }
    Ok(map)
}

pub fn write_image<W: Write>(w: &mut W, image: &Image) -> Result<()> {
    write_magic(w, PIMG)?;
    write_u32(w, image.width as u32)?;
    write_u32(w, image.height as u32)?;
    write_f32_slice(w, &image.data)
}

pub fn read_image<R: Read>(r: &mut R) -> Result<Image> {
    read_magic(r, PIMG)?;
    let width = read_u32(r)? as usize;
    let height = read_u32(r)? as usize;
    let data = read_f32_vec(r, width * height)?;
    Image::new(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_record_layout() {
        let stream = EventStream::new(4, 3, 0, 100, vec![Event::new(3, 2, 42, -1).unwrap()]).unwrap();
        let mut buf = Vec::new();
        write_events(&mut buf, &stream).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 4 + 8 + 16);
        assert_eq!(&buf[..4], b"PEVT");
        let rec = &buf[24..];
        assert_eq!(u64::from_le_bytes(rec[..8].try_into().unwrap()), 42);
        assert_eq!(rec[8..12], [3, 0, 2, 0]);
        assert_eq!(rec[12], 0xff);
        assert_eq!(rec[13..16], [0, 0, 0]);
        let back = read_events(&mut buf.as_slice(), Some((0, 100))).unwrap();
        assert_eq!(back, stream);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"PIMG\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00";
        assert!(matches!(read_normals(&mut &buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn normals_round_trip_with_mask() {
        let mut map = NormalMap::constant(3, 2, [0.0, 0.6, 0.8]);
        map.mask[4] = false;
        map.set(4, [0.0; 3]);
        let mut buf = Vec::new();
        write_normals(&mut buf, &map).unwrap();
        assert_eq!(read_normals(&mut buf.as_slice()).unwrap(), map);
    }

    #[test]
    fn image_round_trip() {
        let img = Image::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut buf = Vec::new();
        write_image(&mut buf, &img).unwrap();
        assert_eq!(read_image(&mut buf.as_slice()).unwrap(), img);
    }
}

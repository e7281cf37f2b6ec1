//! CSV and binary event codecs plus dataset manifests.
//!
//! CSV: one `x,y,t,p` record per line, decimal integers, `p` in `{1,-1}`;
//! an optional `# x,y,t,p` header line and blank lines are skipped.
//!
//! Binary (`EVS1`), little-endian:
//!
//! ```text
//! magic "EVS1" | u16 width | u16 height | u32 count | count x (u16 x, u16 y, u64 t, i8 p)
//! ```

use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Event, EventStream, Polarity};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"EVS1";
const RECORD_BYTES: usize = 2 + 2 + 8 + 1;
const HEADER_BYTES: usize = 4 + 2 + 2 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// `.csv` maps to CSV, everything else to binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EventFormat::Csv,
            _ => EventFormat::Binary,
        }
    }
}

/// Decodes an event stream.
///
/// CSV carries no geometry, so `geometry` must be given for it. For binary
/// input the header geometry is used and, when `geometry` is also given, the
/// two must agree.
pub fn parse_events(
    bytes: &[u8],
    format: EventFormat,
    geometry: Option<(u16, u16)>,
) -> Result<EventStream> {
    match format {
        EventFormat::Csv => {
            let (width, height) = geometry.ok_or_else(|| {
                Error::Config("CSV event input requires sensor width and height".into())
            })?;
            parse_csv(bytes, width, height)
        }
        EventFormat::Binary => {
            let stream = parse_binary(bytes)?;
            if let Some((w, h)) = geometry {
                if (w, h) != (stream.width(), stream.height()) {
                    return Err(Error::ConfigMismatch(format!(
                        "expected {w}x{h} sensor, file declares {}x{}",
                        stream.width(),
                        stream.height()
                    )));
                }
            }
            Ok(stream)
        }
    }
}

fn parse_csv(bytes: &[u8], width: u16, height: u16) -> Result<EventStream> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::parse(format!("byte {}", e.valid_up_to()), "invalid UTF-8"))?;
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let location = || format!("line {}", lineno + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                location(),
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let num = |i: usize, what: &str| -> Result<i64> {
            fields[i]
                .parse::<i64>()
                .map_err(|_| Error::parse(location(), format!("bad {what} '{}'", fields[i])))
        };
        let (x, y, t, p) = (num(0, "x")?, num(1, "y")?, num(2, "t")?, num(3, "p")?);
        let x = u16::try_from(x).map_err(|_| Error::parse(location(), "x out of range"))?;
        let y = u16::try_from(y).map_err(|_| Error::parse(location(), "y out of range"))?;
        let t = u64::try_from(t).map_err(|_| Error::parse(location(), "negative timestamp"))?;
        let p = Polarity::from_sign(p)
            .ok_or_else(|| Error::parse(location(), format!("polarity must be 1 or -1, got {p}")))?;
        events.push(Event::new(x, y, t, p));
    }
    if events.is_empty() {
        return Err(Error::EmptyStream);
    }
    EventStream::new(events, width, height)
}

fn parse_binary(bytes: &[u8]) -> Result<EventStream> {
    if bytes.is_empty() {
        return Err(Error::EmptyStream);
    }
    if bytes.len() < HEADER_BYTES {
        return Err(Error::parse("offset 0", "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::parse("offset 0", "missing EVS1 magic"));
    }
    let mut cur = Cursor::new(&bytes[4..]);
    let width = cur.read_u16::<LittleEndian>().expect("header length checked");
    let height = cur.read_u16::<LittleEndian>().expect("header length checked");
    let count = cur.read_u32::<LittleEndian>().expect("header length checked") as usize;
    if count == 0 {
        return Err(Error::EmptyStream);
    }
    let expected = HEADER_BYTES + count * RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::parse(
            format!("offset {}", bytes.len().min(expected)),
            format!("expected {expected} bytes for {count} events, found {}", bytes.len()),
        ));
    }
    let mut events = Vec::with_capacity(count);
    for i in 0..count {
        let offset = HEADER_BYTES + i * RECORD_BYTES;
        let mut rec = [0u8; RECORD_BYTES];
        cur.read_exact(&mut rec).expect("length checked");
        let mut r = Cursor::new(&rec[..]);
        let x = r.read_u16::<LittleEndian>().expect("record length");
        let y = r.read_u16::<LittleEndian>().expect("record length");
        let t = r.read_u64::<LittleEndian>().expect("record length");
        let p = r.read_i8().expect("record length");
        let p = Polarity::from_sign(p as i64).ok_or_else(|| {
            Error::parse(format!("offset {}", offset + 12), format!("bad polarity {p}"))
        })?;
        events.push(Event::new(x, y, t, p));
    }
    EventStream::new(events, width, height)
}

/// Encodes a stream. Inverse of [`parse_events`]: byte-exact for binary,
/// field-exact for CSV (no header is written).
pub fn write_events(stream: &EventStream, format: EventFormat) -> Vec<u8> {
    match format {
        EventFormat::Csv => {
            let mut out = String::with_capacity(stream.len() * 16);
            for e in stream.events() {
                out.push_str(&format!("{},{},{},{}\n", e.x, e.y, e.t, e.p.sign()));
            }
            out.into_bytes()
        }
        EventFormat::Binary => {
            let mut out = Vec::with_capacity(HEADER_BYTES + stream.len() * RECORD_BYTES);
            out.extend_from_slice(MAGIC);
            out.write_u16::<LittleEndian>(stream.width()).unwrap();
            out.write_u16::<LittleEndian>(stream.height()).unwrap();
            out.write_u32::<LittleEndian>(stream.len() as u32).unwrap();
            for e in stream.events() {
                out.write_u16::<LittleEndian>(e.x).unwrap();
                out.write_u16::<LittleEndian>(e.y).unwrap();
                out.write_u64::<LittleEndian>(e.t).unwrap();
                out.write_i8(e.p.sign()).unwrap();
            }
            out
        }
    }
}

/// Reads a `<path> <label-id>` manifest. Relative paths are resolved
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, u32)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let location = || format!("{}:{}", path.display(), lineno + 1);
        let (file, label) = line
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| Error::parse(location(), "expected '<path> <label-id>'"))?;
        let label: u32 = label
            .parse()
            .map_err(|_| Error::parse(location(), format!("bad label '{label}'")))?;
        let file = PathBuf::from(file.trim());
        let file = if file.is_absolute() { file } else { base.join(file) };
        entries.push((file, label));
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[(PathBuf, u32)]) -> Result<()> {
    let mut out = Vec::new();
    for (file, label) in entries {
        writeln!(out, "{} {}", file.display(), label).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

//! Binary PGM/PPM reading and writing.

use std::io::{Read, Write};
use std::path::Path;

use super::image::{EdgeMap, ImageBuffer};
use crate::error::{Error, Result};
use crate::prompt::WordMask;

fn write_header<W: Write>(w: &mut W, magic: &str, width: usize, height: usize, maxval: u32) -> Result<()> {
    write!(w, "{magic}\n{width} {height}\n{maxval}\n")?;
    Ok(())
}

/// P5 for gray, P6 for RGB.
pub fn write_image<W: Write>(mut w: W, img: &ImageBuffer) -> Result<()> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    write_header(&mut w, magic, img.width, img.height, 255)?;
    w.write_all(img.data())?;
    Ok(())
}

pub fn write_edges<W: Write>(mut w: W, edges: &EdgeMap) -> Result<()> {
    write_header(&mut w, "P5", edges.width, edges.height, 255)?;
    w.write_all(edges.data())?;
    Ok(())
}

/// P5 with maxval 1, one byte per cell.
pub fn write_mask<W: Write>(mut w: W, mask: &WordMask) -> Result<()> {
    write_header(&mut w, "P5", mask.width, mask.height, 1)?;
    w.write_all(mask.grid())?;
    Ok(())
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("not a PNM file".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PNM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PNM header field".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("missing raster separator".into()));
    }
    Ok((Header { magic, width: fields[0], height: fields[1], maxval: fields[2] }, pos + 1))
}

fn raster<'a>(bytes: &'a [u8], header: &Header, offset: usize, channels: usize) -> Result<&'a [u8]> {
    let n = header.width * header.height * channels;
    bytes
        .get(offset..offset + n)
        .ok_or_else(|| Error::Format(format!("expected {n} raster bytes")))
}

/// Reads binary PGM (P5) or PPM (P6) with maxval 255.
pub fn read_image<R: Read>(mut r: R) -> Result<ImageBuffer> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (header, offset) = parse_header(&bytes)?;
    let channels = match &header.magic {
        b"P5" => 1,
        b"P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM type {}", String::from_utf8_lossy(m)))),
    };
    if header.maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {}", header.maxval)));
    }
    let data = raster(&bytes, &header, offset, channels)?.to_vec();
    ImageBuffer::new(header.height, header.width, channels, data)
}

/// Reads a P5 edge map (maxval 255, values 0/255).
pub fn read_edges<R: Read>(r: R) -> Result<EdgeMap> {
    let img = read_image(r)?;
    if img.channels != 1 {
        return Err(Error::Format("edge maps are single-channel".into()));
    }
    EdgeMap::new(img.height, img.width, img.data().to_vec())
}

/// Reads a P5 mask with maxval 1.
pub fn read_mask<R: Read>(mut r: R, word_index: usize) -> Result<WordMask> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (header, offset) = parse_header(&bytes)?;
    if &header.magic != b"P5" || header.maxval != 1 {
        return Err(Error::Format("masks are P5 with maxval 1".into()));
    }
    let data = raster(&bytes, &header, offset, 1)?.to_vec();
    WordMask::new(header.height, header.width, word_index, data)
}

pub fn save_image(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    write_image(std::io::BufWriter::new(std::fs::File::create(path)?), img)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    read_image(std::io::BufReader::new(std::fs::File::open(path)?))
}

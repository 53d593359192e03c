//! Bit-exact corpus file I/O.
//!
//! Feature file layout (little-endian):
//!   magic "VCRNFEAT" | u32 version=1 | u32 id_len | id bytes (UTF-8)
//!   | u32 L | u32 d_a | u32 d_m | L*(d_a+d_m) f32 row-major
//!
//! Caption file: one record per line, `video_id<TAB>raw caption`, UTF-8.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::{Corpus, Video};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"VCRNFEAT";
pub const FEATURE_VERSION: u32 = 1;

/// Extension used for feature files inside a corpus directory.
pub const FEATURE_EXT: &str = "feat";
/// Caption file name inside a corpus directory.
pub const CAPTIONS_FILE: &str = "captions.tsv";

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("unexpected end of file while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(f64::from_le_bytes(buf))
}

pub(crate) fn check_magic(r: &mut impl Read, expected: &[u8; 8]) -> Result<()> {
    let mut found = [0u8; 8];
    read_exact(r, &mut found, "magic")?;
    if &found != expected {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    Ok(())
}

pub(crate) fn check_version(r: &mut impl Read, expected: u32) -> Result<()> {
    let found = read_u32(r, "version")?;
    if found != expected {
        return Err(Error::BadVersion { expected, found });
    }
    Ok(())
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Parse(format!("{what} is not valid UTF-8")))
}

pub(crate) fn write_f32_payload<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f32_payload(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 4];
    read_exact(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Ensure nothing follows the declared payload.
pub(crate) fn expect_eof(r: &mut impl Read, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Parse(format!("trailing bytes after {what} payload"))),
    }
}

pub fn save_features(video: &Video, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    write_u32(&mut w, FEATURE_VERSION)?;
    write_str(&mut w, &video.id)?;
    write_u32(&mut w, video.num_frames() as u32)?;
    write_u32(&mut w, video.d_appearance as u32)?;
    write_u32(&mut w, video.d_motion as u32)?;
    write_f32_payload(&mut w, video.features.data())?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Video> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, FEATURE_MAGIC)?;
    check_version(&mut r, FEATURE_VERSION)?;
    let id = read_str(&mut r, "video id")?;
    let frames = read_u32(&mut r, "frame count")? as usize;
    let d_a = read_u32(&mut r, "appearance dim")? as usize;
    let d_m = read_u32(&mut r, "motion dim")? as usize;
    let values = read_f32_payload(&mut r, frames * (d_a + d_m), "feature payload")?;
    expect_eof(&mut r, "feature")?;
    let features = Tensor::from_vec(frames, d_a + d_m, values)?;
    Video::new(id, features, d_a, d_m)
}

pub fn save_captions(captions: &[(String, String)], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (video_id, text) in captions {
        writeln!(w, "{video_id}\t{text}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_captions(path: &Path) -> Result<Vec<(String, String)>> {
    let content = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| {
            Error::Parse(format!("caption line {} has no tab separator", lineno + 1))
        })?;
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

/// Write a whole corpus into `dir`: one feature file per video plus
/// `captions.tsv`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for video in &corpus.videos {
        let path = dir.join(format!("{}.{FEATURE_EXT}", video.id));
        save_features(video, &path)?;
    }
    save_captions(&corpus.captions, &dir.join(CAPTIONS_FILE))?;
    Ok(())
}

/// Load a corpus directory written by [`save_corpus`]. Feature files are
/// read in sorted filename order so corpus order is stable.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mut feature_paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == FEATURE_EXT).unwrap_or(false))
        .collect();
    feature_paths.sort();
    let mut videos = Vec::with_capacity(feature_paths.len());
    for path in feature_paths {
        videos.push(load_features(&path)?);
    }
    let captions = load_captions(&dir.join(CAPTIONS_FILE))?;
    Ok(Corpus { videos, captions })
}

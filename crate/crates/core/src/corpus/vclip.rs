//! `.vclip` container and PPM frame export.
//!
//! Layout (little-endian): `"VCLP"`, u32 version = 1, u32 T, u32 C, u32 H, u32 W,
//! u8 dtype tag (0 = u8), then T·C·H·W payload bytes in (t, c, y, x) order.
//! Pixel values map affinely from [-1, 1] to 0..=255.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{VideoClip, CHANNELS};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VCLP";
const VERSION: u32 = 1;
const DTYPE_U8: u8 = 0;
const HEADER_LEN: usize = 4 + 5 * 4 + 1;

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

pub fn encode_vclip(clip: &VideoClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + clip.data().len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, clip.frames() as u32, CHANNELS as u32, clip.height() as u32, clip.width() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(DTYPE_U8);
    out.extend(clip.data().iter().map(|&v| to_byte(v)));
    out
}

pub fn decode_vclip(bytes: &[u8]) -> Result<VideoClip> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a .vclip file".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (version, t, c, h, w) = (u32_at(0), u32_at(1), u32_at(2), u32_at(3), u32_at(4));
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported .vclip version {version}")));
    }
    if c != CHANNELS {
        return Err(Error::Format(format!("expected {CHANNELS} channels, found {c}")));
    }
    if bytes[HEADER_LEN - 1] != DTYPE_U8 {
        return Err(Error::Format(format!("unknown dtype tag {}", bytes[HEADER_LEN - 1])));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != t * c * h * w {
        return Err(Error::Format(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            t * c * h * w
        )));
    }
    VideoClip::new(t, h, w, payload.iter().map(|&b| from_byte(b)).collect())
}

/// Write through a sibling temp file and rename, so a failed write leaves no partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_vclip(path: &Path, clip: &VideoClip) -> Result<()> {
    write_atomic(path, &encode_vclip(clip))
}

pub fn read_vclip(path: &Path) -> Result<VideoClip> {
    decode_vclip(&fs::read(path)?)
}

/// One binary PPM (P6) per frame, named `frame_%04d.ppm` inside `dir`.
pub fn write_ppm_frames(dir: &Path, clip: &VideoClip) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let (h, w) = (clip.height(), clip.width());
    let mut paths = Vec::with_capacity(clip.frames());
    for t in 0..clip.frames() {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    bytes.push(to_byte(clip.get(t, c, y, x)));
                }
            }
        }
        let path = dir.join(format!("frame_{t:04}.ppm"));
        write_atomic(&path, &bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, ALLOWED_LENGTHS};
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let clip = VideoClip::black(2, 4, 5);
        let bytes = encode_vclip(&clip);
        assert_eq!(&bytes[..4], b"VCLP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &4u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &5u32.to_le_bytes());
        assert_eq!(bytes[24], 0);
        assert_eq!(bytes.len(), 25 + 2 * 3 * 4 * 5);
        assert!(bytes[25..].iter().all(|&b| b == 0));
    }

    #[test]
    fn rendered_clips_round_trip_exactly() {
        for item in build_corpus(8, 11, &ALLOWED_LENGTHS).unwrap() {
            assert_eq!(decode_vclip(&encode_vclip(&item.clip)).unwrap(), item.clip);
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = encode_vclip(&VideoClip::black(1, 4, 4));
        bytes.pop();
        assert!(matches!(decode_vclip(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn ppm_frames_written_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let clip = build_corpus(1, 5, &[4]).unwrap().remove(0).clip;
        let paths = write_ppm_frames(dir.path(), &clip).unwrap();
        assert_eq!(paths.len(), 4);
        assert!(paths[3].ends_with("frame_0003.ppm"));
        let bytes = std::fs::read(&paths[0]).unwrap();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 32 * 32 * 3);
    }

    proptest! {
        #[test]
        fn byte_quantization_round_trips(bytes in proptest::collection::vec(any::<u8>(), 3 * 2 * 2)) {
            let clip = VideoClip::new(1, 2, 2, bytes.iter().map(|&b| from_byte(b)).collect()).unwrap();
            let enc = encode_vclip(&clip);
            prop_assert_eq!(&enc[HEADER_LEN..], &bytes[..]);
        }
    }
}

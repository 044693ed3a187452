//! Dataset persistence: a JSONL index plus a binary frame sidecar.
//!
//! `episodes.jsonl` holds one episode record per line (everything except
//! the clip). `frames.cdrv` holds the clips back-to-back as little-endian
//! 32-bit reals behind a fixed header:
//!
//! ```text
//! magic "CDRV" | version u32 | F u32 | H u32 | W u32 | count u32
//! ```
//!
//! All integers are little-endian. Every clip in one dataset shares the
//! same dimensions.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::episode::{Episode, SimError};

const CDRV_MAGIC: [u8; 4] = *b"CDRV";
pub const CDRV_VERSION: u32 = 1;

const INDEX_FILE: &str = "episodes.jsonl";
const FRAMES_FILE: &str = "frames.cdrv";

pub fn write_dataset(episodes: &[Episode], dir: &Path) -> Result<(), SimError> {
    let dims = match episodes.first() {
        Some(e) => e.frame_dims,
        None => return Err(SimError::BadConfig { reason: "cannot write an empty dataset".into() }),
    };
    let frame_len = dims[0] * dims[1] * dims[2] * 3;
    for e in episodes {
        if e.frame_dims != dims {
            return Err(SimError::DimsMismatch { episode: e.frame_dims, config: dims });
        }
        if e.clip.len() != frame_len {
            return Err(SimError::MissingClip { id: e.id.clone() });
        }
    }
    std::fs::create_dir_all(dir)?;

    let mut index = BufWriter::new(File::create(dir.join(INDEX_FILE))?);
    for e in episodes {
        let line = serde_json::to_string(e).map_err(|source| SimError::Json { line: 0, source })?;
        writeln!(index, "{line}")?;
    }
    index.flush()?;

    let mut frames = BufWriter::new(File::create(dir.join(FRAMES_FILE))?);
    frames.write_all(&CDRV_MAGIC)?;
    frames.write_all(&CDRV_VERSION.to_le_bytes())?;
    for d in dims {
        frames.write_all(&(d as u32).to_le_bytes())?;
    }
    frames.write_all(&(episodes.len() as u32).to_le_bytes())?;
    for e in episodes {
        for &p in &e.clip {
            frames.write_all(&p.to_le_bytes())?;
        }
    }
    frames.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, SimError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Episode>, SimError> {
    let index = BufReader::new(File::open(dir.join(INDEX_FILE))?);
    let mut episodes = Vec::new();
    for (i, line) in index.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Episode =
            serde_json::from_str(&line).map_err(|source| SimError::Json { line: i + 1, source })?;
        episodes.push(e);
    }

    let mut frames = BufReader::new(File::open(dir.join(FRAMES_FILE))?);
    let mut magic = [0u8; 4];
    frames.read_exact(&mut magic)?;
    if magic != CDRV_MAGIC {
        return Err(SimError::BadMagic);
    }
    let version = read_u32(&mut frames)?;
    if version != CDRV_VERSION {
        return Err(SimError::BadVersion { got: version, expected: CDRV_VERSION });
    }
    let dims = [
        read_u32(&mut frames)? as usize,
        read_u32(&mut frames)? as usize,
        read_u32(&mut frames)? as usize,
    ];
    let count = read_u32(&mut frames)? as usize;
    if count != episodes.len() {
        return Err(SimError::CountMismatch { sidecar: count, index: episodes.len() });
    }
    let frame_len = dims[0] * dims[1] * dims[2] * 3;
    let expected = count * frame_len * 4;
    let mut payload = Vec::with_capacity(expected);
    frames.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(SimError::Truncated { expected, found: payload.len() });
    }
    for (i, e) in episodes.iter_mut().enumerate() {
        if e.frame_dims != dims {
            return Err(SimError::DimsMismatch { episode: e.frame_dims, config: dims });
        }
        e.clip = payload[i * frame_len * 4..(i + 1) * frame_len * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
    }
    Ok(episodes)
}

#[cfg(test)]
mod tests {
    use crate::dsdag::scenario::traffic_scenario;

    use super::super::episode::ScenarioConfig;
    use super::super::generate::generate_dataset;
    use super::*;

    fn cfg(episodes: usize) -> ScenarioConfig {
        ScenarioConfig {
            num_factors: 4,
            spurious_rho: 0.0,
            frame_dims: [4, 64, 96],
            noise_sigma: 0.05,
            episodes,
            seed: 21,
            spurious: None,
            render: true,
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let scm = traffic_scenario().unwrap();
        let episodes = generate_dataset(&scm, &cfg(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&episodes, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(episodes, back);
    }

    #[test]
    fn sidecar_size_is_header_plus_frames() {
        let scm = traffic_scenario().unwrap();
        let n = 3;
        let episodes = generate_dataset(&scm, &cfg(n)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&episodes, dir.path()).unwrap();
        let size = std::fs::metadata(dir.path().join(FRAMES_FILE)).unwrap().len();
        assert_eq!(size, (24 + n * 4 * 64 * 96 * 3 * 4) as u64);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let scm = traffic_scenario().unwrap();
        let episodes = generate_dataset(&scm, &cfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&episodes, dir.path()).unwrap();
        let path = dir.path().join(FRAMES_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(SimError::BadMagic)));
    }

    #[test]
    fn future_version_rejected() {
        let scm = traffic_scenario().unwrap();
        let episodes = generate_dataset(&scm, &cfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&episodes, dir.path()).unwrap();
        let path = dir.path().join(FRAMES_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(SimError::BadVersion { got: 7, expected: CDRV_VERSION })
        ));
    }

    #[test]
    fn truncated_sidecar_rejected() {
        let scm = traffic_scenario().unwrap();
        let episodes = generate_dataset(&scm, &cfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&episodes, dir.path()).unwrap();
        let path = dir.path().join(FRAMES_FILE);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(SimError::Truncated { .. })));
    }

    #[test]
    fn unrendered_episode_cannot_be_written() {
        let scm = traffic_scenario().unwrap();
        let bare = ScenarioConfig { render: false, ..cfg(1) };
        let episodes = generate_dataset(&scm, &bare).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_dataset(&episodes, dir.path()),
            Err(SimError::MissingClip { .. })
        ));
    }
}

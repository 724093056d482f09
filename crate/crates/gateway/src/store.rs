//! On-disk session storage.
//!
//! ```text
//! <root>/<id>/session.json          SessionManifest
//! <root>/<id>/first/<chunk>.raw     first image for the given next_chunk
//! <root>/<id>/segments/<k>/NNN.raw  generated frames, raw f32
//! ```
//!
//! `session.json` is written last through a rename, so a crash mid-step
//! leaves the previous state loadable.

use std::fs;
use std::path::{Path, PathBuf};

use streetgen_core::session_engine::{SessionManifest, SessionState};
use streetgen_core::ImageBuffer;

use crate::api::ApiError;

#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

pub fn validate_id(id: &str) -> Result<(), ApiError> {
    let ok = !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ApiError::bad_request(format!("invalid session id {id:?}")))
    }
}

fn io(e: std::io::Error) -> ApiError {
    streetgen_core::Error::Io(e).into()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ApiError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ApiError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Claims a directory for a new session. With no id, picks the first
    /// free `sNNNNNN`.
    pub fn claim(&self, id: Option<&str>) -> Result<String, ApiError> {
        if let Some(id) = id {
            validate_id(id)?;
            return match fs::create_dir(self.dir(id)) {
                Ok(()) => Ok(id.to_string()),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    Err(ApiError::new("session_exists", format!("session {id} already exists")))
                }
                Err(e) => Err(io(e)),
            };
        }
        for n in 1.. {
            let id = format!("s{n:06}");
            match fs::create_dir(self.dir(&id)) {
                Ok(()) => return Ok(id),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(io(e)),
            }
        }
        unreachable!()
    }

    /// Releases a claimed directory that never got a session.
    pub fn release(&self, id: &str) {
        if !self.dir(id).join("session.json").exists() {
            let _ = fs::remove_dir_all(self.dir(id));
        }
    }

    /// Persists a state, plus the frames of the segment it just generated.
    pub fn save(&self, state: &SessionState, new_segment: Option<(usize, &[ImageBuffer])>) -> Result<(), ApiError> {
        let dir = self.dir(state.id());
        if let Some((k, frames)) = new_segment {
            let seg = dir.join("segments").join(k.to_string());
            fs::create_dir_all(&seg).map_err(io)?;
            for (i, f) in frames.iter().enumerate() {
                f.save_raw(&seg.join(format!("{i:03}.raw")))?;
            }
        }
        let first = dir.join("first");
        fs::create_dir_all(&first).map_err(io)?;
        write_atomic(
            &first.join(format!("{}.raw", state.manifest.next_chunk)),
            &state.current_first_image.to_raw_bytes(),
        )?;
        let text = serde_json::to_vec_pretty(&state.manifest).map_err(|e| ApiError::new("io_error", e.to_string()))?;
        write_atomic(&dir.join("session.json"), &text)
    }

    pub fn load(&self, id: &str) -> Result<SessionState, ApiError> {
        validate_id(id)?;
        let path = self.dir(id).join("session.json");
        let text = fs::read(&path).map_err(|_| ApiError::not_found(format!("no session {id}")))?;
        let manifest: SessionManifest =
            serde_json::from_slice(&text).map_err(|e| ApiError::new("parse_error", format!("{}: {e}", path.display())))?;
        let first = ImageBuffer::load_raw(&self.dir(id).join("first").join(format!("{}.raw", manifest.next_chunk)))?;
        Ok(SessionState { manifest, current_first_image: first })
    }

    pub fn list(&self) -> Result<Vec<String>, ApiError> {
        let mut ids: Vec<String> = fs::read_dir(&self.root)
            .map_err(io)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("session.json").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn segment_frames(&self, id: &str, k: usize) -> Result<Vec<ImageBuffer>, ApiError> {
        let state = self.load(id)?;
        let seg = state
            .manifest
            .segments
            .get(k)
            .ok_or_else(|| ApiError::not_found(format!("session {id} has no segment {k}")))?;
        let dir = self.dir(id).join("segments").join(k.to_string());
        (0..seg.frame_count)
            .map(|i| Ok(ImageBuffer::load_raw(&dir.join(format!("{i:03}.raw")))?))
            .collect()
    }

    /// Frame `n` of the deduplicated sequence: all of segment 0, then every
    /// later segment without its repeated first frame.
    pub fn unique_frame(&self, id: &str, n: usize) -> Result<ImageBuffer, ApiError> {
        let state = self.load(id)?;
        let (k, i) = locate_unique(&state.manifest, n).ok_or_else(|| ApiError::not_found(format!("session {id} has no frame {n}")))?;
        Ok(ImageBuffer::load_raw(&self.dir(id).join("segments").join(k.to_string()).join(format!("{i:03}.raw")))?)
    }
}

pub fn unique_count(m: &SessionManifest) -> usize {
    m.segments.iter().enumerate().map(|(k, s)| s.frame_count - usize::from(k > 0)).sum()
}

/// Maps a unique frame number to (segment, frame within segment).
pub fn locate_unique(m: &SessionManifest, mut n: usize) -> Option<(usize, usize)> {
    for (k, s) in m.segments.iter().enumerate() {
        let skip = usize::from(k > 0);
        let len = s.frame_count - skip;
        if n < len {
            return Some((k, n + skip));
        }
        n -= len;
    }
    None
}

//! Frame extraction into a content-addressed cache.

use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use grounding::frames::list_frame_files;
use grounding::manifest::{Manifest, VideoEntry};
use grounding::timeline::make_grid;
use sha2::{Digest, Sha256};

const COMPLETE_MARKER: &str = ".complete";

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct IngestStats {
    pub decoded: usize,
    pub cached: usize,
    pub directories: usize,
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

pub fn render_decoder(template: &str, input: &Path, output: &Path, fps: f64) -> String {
    template
        .replace("{input}", &shell_quote(&input.to_string_lossy()))
        .replace("{output}", &shell_quote(&output.to_string_lossy()))
        .replace("{fps}", &fps.to_string())
}

/// Cache key over the media bytes, sampling rate and decoder command.
fn cache_key(media: &Path, fps: f64, decoder: &str) -> Result<String> {
    let mut file = std::fs::File::open(media)?;
    let mut h = Sha256::new();
    std::io::copy(&mut file, &mut h)?;
    h.update(fps.to_bits().to_le_bytes());
    h.update(decoder.as_bytes());
    Ok(hex::encode(h.finalize()))
}

fn check_count(video: &VideoEntry, dir: &Path) -> Result<()> {
    let want = make_grid(video.duration, video.fps)?.len();
    let got = list_frame_files(dir)?.len();
    if got != want {
        bail!(
            "video {:?}: {} holds {got} frames, expected {want} for {} s at {} fps",
            video.id,
            dir.display(),
            video.duration,
            video.fps
        );
    }
    Ok(())
}

fn decode(video: &VideoEntry, media: &Path, cache: &Path, decoder: &str) -> Result<(PathBuf, bool)> {
    let key = cache_key(media, video.fps, decoder)?;
    let dir = cache.join(&key);
    if dir.join(COMPLETE_MARKER).exists() {
        check_count(video, &dir)?;
        return Ok((dir, false));
    }
    let tmp = cache.join(format!("{key}.partial"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    let cmd = render_decoder(decoder, media, &tmp, video.fps);
    tracing::info!(video = %video.id, %cmd, "decoding frames");
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .with_context(|| format!("video {:?}: cannot run decoder", video.id))?;
    if !out.status.success() {
        bail!(
            "video {:?}: decoder exited with {}: {}",
            video.id,
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        );
    }
    check_count(video, &tmp)?;
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::rename(&tmp, &dir)?;
    std::fs::write(dir.join(COMPLETE_MARKER), b"")?;
    Ok((dir, true))
}

/// Resolves every video to a frame directory. Media files are decoded into
/// `cache` once; later runs reuse the cached frames.
pub fn ingest(manifest: &Manifest, cache: &Path, decoder: &str) -> Result<(Manifest, IngestStats)> {
    std::fs::create_dir_all(cache)?;
    let mut out = manifest.clone();
    let mut stats = IngestStats::default();
    for video in &mut out.videos {
        if video.crop.is_some() {
            continue;
        }
        match (&video.frames, &video.media) {
            (Some(dir), _) => {
                if !dir.is_dir() {
                    bail!("video {:?}: frame directory {} not found", video.id, dir.display());
                }
                check_count(video, dir)?;
                stats.directories += 1;
            }
            (None, Some(media)) => {
                if !media.is_file() {
                    bail!("video {:?}: media file {} not found", video.id, media.display());
                }
                let (dir, fresh) = decode(video, media, cache, decoder)?;
                if fresh {
                    stats.decoded += 1;
                } else {
                    stats.cached += 1;
                }
                video.frames = Some(dir);
            }
            (None, None) => bail!("video {:?} has neither media nor frames", video.id),
        }
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quoting() {
        let cmd = render_decoder("dec {input} {output} {fps}", Path::new("/a b/it's.mp4"), Path::new("/o"), 2.0);
        assert_eq!(cmd, r"dec '/a b/it'\''s.mp4' '/o' 2");
    }
}

//! Dataset manifests, spectrogram loading/caching and batch prefetching.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{self, LogMelSpectrogram, MelConfig, NormalizationStats};
use crate::error::{ensure, Error, Result};

/// One clip: `path` is relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub duration: f64,
    /// Multi-hot class vector; ignored by pre-training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads a JSON-lines manifest; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            entries.push(e);
        }
        ensure!(!entries.is_empty(), Format, "manifest {} is empty", path.display());
        let m = Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        };
        m.num_classes()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    /// Label vector width when every entry is labelled consistently, `None`
    /// when no entry carries labels.
    pub fn num_classes(&self) -> Result<Option<usize>> {
        let widths: Vec<Option<usize>> = self.entries.iter().map(|e| e.labels.as_ref().map(Vec::len)).collect();
        match widths.first().copied().flatten() {
            None => {
                ensure!(widths.iter().all(Option::is_none), Format, "manifest mixes labelled and unlabelled clips");
                Ok(None)
            }
            Some(c) => {
                ensure!(
                    widths.iter().all(|w| *w == Some(c)),
                    Format,
                    "manifest label vectors differ in length"
                );
                ensure!(c > 0, Format, "empty label vectors");
                Ok(Some(c))
            }
        }
    }

    /// Label matrix rows as `f32` 0/1 values.
    pub fn label_rows(&self) -> Result<Vec<Vec<f32>>> {
        ensure!(self.num_classes()?.is_some(), Format, "manifest has no labels");
        Ok(self
            .entries
            .iter()
            .map(|e| e.labels.as_ref().unwrap().iter().map(|&v| if v > 0 { 1.0 } else { 0.0 }).collect())
            .collect())
    }
}

/// Anything that can produce the normalised spectrogram of clip `i`.
pub trait ClipSource: Send + Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<LogMelSpectrogram>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ClipSource for Vec<LogMelSpectrogram> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn load(&self, index: usize) -> Result<LogMelSpectrogram> {
        self.get(index)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("clip {index} out of range")))
    }
}

/// Clips listed in a manifest, decoded from WAV and optionally cached as
/// spectrogram files keyed by path, frame count and normalisation.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    pub manifest: Manifest,
    pub frames: usize,
    pub mel: MelConfig,
    pub stats: NormalizationStats,
    pub cache_dir: Option<PathBuf>,
}

impl ManifestSource {
    fn cache_path(&self, dir: &Path, wav: &Path) -> PathBuf {
        let mut h = Sha256::new();
        h.update(wav.to_string_lossy().as_bytes());
        h.update(self.frames.to_le_bytes());
        h.update(self.stats.mean.to_le_bytes());
        h.update(self.stats.std.to_le_bytes());
        let hex: String = h.finalize()[..12].iter().map(|b| format!("{b:02x}")).collect();
        dir.join(format!("{hex}.spc"))
    }
}

impl ClipSource for ManifestSource {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn load(&self, index: usize) -> Result<LogMelSpectrogram> {
        let entry = self
            .manifest
            .entries
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("clip {index} out of range")))?;
        let wav = self.manifest.resolve(entry);
        let cached = self.cache_dir.as_ref().map(|d| self.cache_path(d, &wav));
        if let Some(c) = &cached {
            if c.exists() {
                let s = dsp::read_cache(c)?;
                if s.frames() == self.frames {
                    return Ok(s);
                }
            }
        }
        let s = dsp::prepare(&dsp::read_wav(&wav)?, self.frames, &self.mel, self.stats)?;
        if let Some(c) = &cached {
            std::fs::create_dir_all(c.parent().unwrap()).map_err(|e| Error::io(c, e))?;
            dsp::write_cache(c, &s)?;
        }
        Ok(s)
    }
}

/// Decorrelated seed for a `(seed, tag, a, b)` tuple (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [tag, a, b] {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15 ^ v.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const EPOCH_TAG: u64 = 0x45504f4348;

/// Seeded permutation of `0..n` for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, EPOCH_TAG, epoch, 0)));
    order
}

/// Clip indices for global step `step` with full batches only.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    let per_epoch = steps_per_epoch(n, batch)?;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    Ok(epoch_order(n, seed, epoch)[pos * batch..(pos + 1) * batch].to_vec())
}

pub fn steps_per_epoch(n: usize, batch: usize) -> Result<u64> {
    ensure!(batch > 0 && n >= batch, InvalidArgument, "{n} clips cannot fill a batch of {batch}");
    Ok((n / batch) as u64)
}

/// Loads batches on a background thread, at most `depth` ahead of the
/// consumer.
pub struct Prefetcher {
    rx: Receiver<Result<Vec<LogMelSpectrogram>>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(source: Arc<dyn ClipSource>, batches: Vec<Vec<usize>>, depth: usize) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            for idx in batches {
                let batch = idx.iter().map(|&i| source.load(i)).collect::<Result<Vec<_>>>();
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            rx,
            handle: Some(handle),
        }
    }

    pub fn next_batch(&mut self) -> Result<Vec<LogMelSpectrogram>> {
        self.rx
            .recv()
            .map_err(|_| Error::Precondition("batch loader stopped early".into()))?
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Unblock a sender waiting on a full queue before joining.
        while self.rx.try_recv().is_ok() {}
        if let Some(h) = self.handle.take() {
            drop(std::mem::replace(&mut self.rx, sync_channel(1).1));
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn manifest_roundtrip_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            root: dir.path().to_path_buf(),
            entries: vec![
                ManifestEntry {
                    path: "a.wav".into(),
                    duration: 1.0,
                    labels: Some(vec![1, 0, 1]),
                },
                ManifestEntry {
                    path: "b.wav".into(),
                    duration: 2.0,
                    labels: Some(vec![0, 1, 0]),
                },
            ],
        };
        let p = dir.path().join("m.jsonl");
        m.save(&p).unwrap();
        let back = Manifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.num_classes().unwrap(), Some(3));
        assert_eq!(back.resolve(&back.entries[0]), dir.path().join("a.wav"));
        std::fs::write(&p, "{\"path\":\"a.wav\",\"duration\":1,\"labels\":[1]}\n{\"path\":\"b.wav\",\"duration\":1}\n").unwrap();
        assert!(Manifest::load(&p).is_err());
    }

    #[test]
    fn orders_are_seeded_permutations() {
        let a = epoch_order(20, 3, 0);
        assert_eq!(a, epoch_order(20, 3, 0));
        assert_ne!(a, epoch_order(20, 3, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
        assert_eq!(steps_per_epoch(10, 4).unwrap(), 2);
        assert_eq!(batch_indices(10, 4, 3, 3).unwrap(), epoch_order(10, 3, 1)[4..8].to_vec());
        assert!(steps_per_epoch(3, 4).is_err());
    }

    #[test]
    fn wav_source_caches() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<f32> = (0..16000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect();
        dsp::write_wav(&dir.path().join("a.wav"), &dsp::Waveform::new(samples, 16000).unwrap()).unwrap();
        let m = Manifest {
            root: dir.path().to_path_buf(),
            entries: vec![ManifestEntry {
                path: "a.wav".into(),
                duration: 1.0,
                labels: None,
            }],
        };
        let src = ManifestSource {
            manifest: m,
            frames: 96,
            mel: MelConfig::default(),
            stats: dsp::AUDIOSET_STATS,
            cache_dir: Some(dir.path().join("cache")),
        };
        let a = src.load(0).unwrap();
        assert_eq!(a.frames(), 96);
        assert_eq!(std::fs::read_dir(dir.path().join("cache")).unwrap().count(), 1);
        assert_eq!(src.load(0).unwrap(), a);
    }

    #[test]
    fn prefetch_preserves_order() {
        let clips: Vec<LogMelSpectrogram> = (0..6)
            .map(|i| LogMelSpectrogram::new(Array2::from_elem((16, 16), i as f32)).unwrap())
            .collect();
        let batches = vec![vec![5, 1], vec![0, 2], vec![3, 4]];
        let mut p = Prefetcher::spawn(Arc::new(clips), batches.clone(), 1);
        for b in &batches {
            let got = p.next_batch().unwrap();
            let ids: Vec<usize> = got.iter().map(|s| s.data()[[0, 0]] as usize).collect();
            assert_eq!(&ids, b);
        }
        assert!(p.next_batch().is_err());
        // dropping with unconsumed batches must not hang
        let clips: Vec<LogMelSpectrogram> = (0..2)
            .map(|_| LogMelSpectrogram::new(Array2::zeros((16, 16))).unwrap())
            .collect();
        let p = Prefetcher::spawn(Arc::new(clips), vec![vec![0]; 10], 1);
        drop(p);
    }
}

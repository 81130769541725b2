//! Label-ontology analysis (distinct sound events per clip) and a synthetic
//! polyphonic dataset generator.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{write_wav, Waveform};
use crate::error::{ensure, Error, Result};
use crate::trainer::data::{derive_seed, Manifest, ManifestEntry};

/// One ontology record; fields other than these are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OntologyRecord {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub child_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ontology {
    pub names: BTreeMap<String, String>,
    pub id_to_parent: BTreeMap<String, BTreeSet<String>>,
    pub id_to_children: BTreeMap<String, BTreeSet<String>>,
}

impl Ontology {
    pub fn from_records(records: &[OntologyRecord]) -> Result<Self> {
        let mut o = Self::default();
        for r in records {
            ensure!(
                o.names.insert(r.id.clone(), r.name.clone()).is_none(),
                Format,
                "duplicate ontology id {}",
                r.id
            );
        }
        for r in records {
            for c in &r.child_ids {
                ensure!(c != &r.id, Format, "{} lists itself as a child", r.id);
                ensure!(o.names.contains_key(c), Format, "{} has unknown child {c}", r.id);
                o.id_to_children.entry(r.id.clone()).or_default().insert(c.clone());
                o.id_to_parent.entry(c.clone()).or_default().insert(r.id.clone());
            }
        }
        if let Some(id) = o.find_cycle() {
            return Err(Error::Format(format!("ontology has a cycle through {id}")));
        }
        Ok(o)
    }

    /// Parses a JSON array of records.
    pub fn parse(text: &str) -> Result<Self> {
        let records: Vec<OntologyRecord> =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("ontology: {e}")))?;
        Self::from_records(&records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.names.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn find_cycle(&self) -> Option<String> {
        // 0 unvisited, 1 on stack, 2 done
        let mut state: BTreeMap<&str, u8> = BTreeMap::new();
        for root in self.names.keys() {
            if state.get(root.as_str()).copied().unwrap_or(0) != 0 {
                continue;
            }
            let mut stack: Vec<(&str, Vec<&str>)> = vec![(root, self.children_of(root))];
            state.insert(root, 1);
            while let Some((node, pending)) = stack.last_mut() {
                match pending.pop() {
                    Some(c) => match state.get(c).copied().unwrap_or(0) {
                        0 => {
                            state.insert(c, 1);
                            let next = self.children_of(c);
                            stack.push((c, next));
                        }
                        1 => return Some(c.to_string()),
                        _ => {}
                    },
                    None => {
                        state.insert(node, 2);
                        stack.pop();
                    }
                }
            }
        }
        None
    }

    fn children_of(&self, id: &str) -> Vec<&str> {
        self.id_to_children
            .get(id)
            .map(|s| s.iter().map(String::as_str).collect())
            .unwrap_or_default()
    }

    fn walk(&self, start: &str, hops: usize, up: bool, out: &mut BTreeSet<String>) {
        let map = if up { &self.id_to_parent } else { &self.id_to_children };
        let mut queue = VecDeque::from([(start.to_string(), 0usize)]);
        let mut seen = BTreeSet::from([start.to_string()]);
        while let Some((id, d)) = queue.pop_front() {
            if d == hops {
                continue;
            }
            for next in map.get(&id).into_iter().flatten() {
                if seen.insert(next.clone()) {
                    out.insert(next.clone());
                    queue.push_back((next.clone(), d + 1));
                }
            }
        }
    }
}

/// Ancestors and descendants of `label` within `level` hops, excluding the
/// label itself.
pub fn related_labels(label: &str, level: usize, o: &Ontology) -> Result<BTreeSet<String>> {
    ensure!(level >= 1, InvalidArgument, "hierarchy level must be at least 1");
    ensure!(o.contains(label), InvalidArgument, "unknown label {label}");
    let mut out = BTreeSet::new();
    o.walk(label, level, true, &mut out);
    o.walk(label, level, false, &mut out);
    out.remove(label);
    Ok(out)
}

/// Labels are visited in sorted order and kept when unrelated (within
/// `level`) to every label kept so far; returns the number kept.
pub fn distinct_event_count(labels: &BTreeSet<String>, level: usize, o: &Ontology) -> Result<usize> {
    Ok(distinct_events(labels, level, o)?.len())
}

pub fn distinct_events(labels: &BTreeSet<String>, level: usize, o: &Ontology) -> Result<Vec<String>> {
    let mut kept: Vec<(String, BTreeSet<String>)> = Vec::new();
    for l in labels {
        let rel = related_labels(l, level, o)?;
        if kept.iter().all(|(k, _)| !rel.contains(k)) {
            kept.push((l.clone(), rel));
        }
    }
    Ok(kept.into_iter().map(|(k, _)| k).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledClip {
    pub id: String,
    pub labels: BTreeSet<String>,
}

/// Percentage of clips with at least two distinct events.
pub fn polyphony_percentage(clips: &[LabeledClip], level: usize, o: &Ontology) -> Result<f64> {
    ensure!(!clips.is_empty(), InvalidArgument, "no clips");
    let mut poly = 0usize;
    for c in clips {
        ensure!(!c.labels.is_empty(), InvalidArgument, "clip {} has no labels", c.id);
        if distinct_event_count(&c.labels, level, o)? >= 2 {
            poly += 1;
        }
    }
    Ok(100.0 * poly as f64 / clips.len() as f64)
}

// ---------------------------------------------------------------------------
// synthetic polyphonic clips

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Tone,
    Chirp,
    NoiseBurst,
    AmTone,
}

pub const KINDS: [SynthKind; 4] = [SynthKind::Tone, SynthKind::Chirp, SynthKind::NoiseBurst, SynthKind::AmTone];

/// Frequency bands (Hz), spaced far apart on the mel scale.
pub const BANDS: [(f64, f64); 4] = [(150.0, 400.0), (600.0, 1200.0), (1800.0, 3200.0), (4500.0, 7200.0)];

pub const NUM_CLASSES: usize = KINDS.len() * BANDS.len();

/// Class index `kind · 4 + band`.
pub fn class_of(kind: SynthKind, band: usize) -> usize {
    KINDS.iter().position(|&k| k == kind).unwrap() * BANDS.len() + band
}

pub fn class_parts(class: usize) -> (SynthKind, usize) {
    (KINDS[class / BANDS.len()], class % BANDS.len())
}

const AM_RATE_HZ: f64 = 8.0;
const NOISE_PARTIALS: usize = 24;
const FADE_S: f64 = 0.01;
const BACKGROUND_STD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEvent {
    pub class: usize,
    pub kind: SynthKind,
    pub band: usize,
    pub onset: f64,
    pub duration: f64,
    /// Start and end frequency in Hz (equal except for chirps; the band
    /// edges for noise bursts).
    pub f_start: f64,
    pub f_end: f64,
    pub gain: f64,
}

impl SynthEvent {
    pub fn offset(&self) -> f64 {
        self.onset + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_clips: usize,
    /// Inclusive `(low, high)` ranges of distinct events per clip; clips
    /// cycle through the bins.
    pub degree_bins: Vec<(usize, usize)>,
    pub clip_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub id: String,
    pub bin: usize,
    pub events: Vec<SynthEvent>,
    pub labels: Vec<u8>,
    pub waveform: Waveform,
}

const SYNTH_TAG: u64 = 0x53594e54;

fn sample_event<R: Rng + ?Sized>(class: usize, clip_s: f64, rng: &mut R) -> SynthEvent {
    let (kind, band) = class_parts(class);
    let (lo, hi) = BANDS[band];
    let duration = rng.random_range(0.3..0.8) * clip_s;
    let onset = rng.random_range(0.0..=(clip_s - duration));
    // keep a margin inside the band so spectral spread stays within it
    let inner = |rng: &mut R| lo + (hi - lo) * rng.random_range(0.2..0.8);
    let (f_start, f_end) = match kind {
        SynthKind::Tone | SynthKind::AmTone => {
            let f = inner(rng);
            (f, f)
        }
        SynthKind::Chirp => {
            let a = lo + (hi - lo) * rng.random_range(0.1..0.3);
            let b = lo + (hi - lo) * rng.random_range(0.7..0.9);
            if rng.random_bool(0.5) {
                (a, b)
            } else {
                (b, a)
            }
        }
        SynthKind::NoiseBurst => (lo, hi),
    };
    SynthEvent {
        class,
        kind,
        band,
        onset,
        duration,
        f_start,
        f_end,
        gain: rng.random_range(0.3..=1.0),
    }
}

/// Adds `event` into `out` (sampled at `sr`).
pub fn render_event<R: Rng + ?Sized>(event: &SynthEvent, sr: u32, out: &mut [f32], rng: &mut R) {
    let sr_f = sr as f64;
    let start = (event.onset * sr_f).round() as usize;
    let len = ((event.duration * sr_f).round() as usize).min(out.len().saturating_sub(start));
    let fade = ((FADE_S * sr_f) as usize).max(1).min(len / 2).max(1);
    let partials: Vec<(f64, f64)> = if event.kind == SynthKind::NoiseBurst {
        (0..NOISE_PARTIALS)
            .map(|_| (rng.random_range(event.f_start..event.f_end), rng.random_range(0.0..2.0 * PI)))
            .collect()
    } else {
        vec![(event.f_start, rng.random_range(0.0..2.0 * PI))]
    };
    let norm = 1.0 / (partials.len() as f64).sqrt();
    for n in 0..len {
        let t = n as f64 / sr_f;
        let env = if n < fade {
            0.5 - 0.5 * (PI * n as f64 / fade as f64).cos()
        } else if n >= len - fade {
            0.5 - 0.5 * (PI * (len - n) as f64 / fade as f64).cos()
        } else {
            1.0
        };
        let v = match event.kind {
            SynthKind::Tone => (2.0 * PI * event.f_start * t + partials[0].1).sin(),
            SynthKind::AmTone => {
                let am = 0.5 + 0.5 * (2.0 * PI * AM_RATE_HZ * t).sin();
                am * (2.0 * PI * event.f_start * t + partials[0].1).sin()
            }
            SynthKind::Chirp => {
                let k = (event.f_end - event.f_start) / event.duration;
                (2.0 * PI * (event.f_start * t + 0.5 * k * t * t) + partials[0].1).sin()
            }
            SynthKind::NoiseBurst => partials.iter().map(|&(f, p)| (2.0 * PI * f * t + p).sin()).sum::<f64>() * norm,
        };
        out[start + n] += (event.gain * env * v) as f32;
    }
}

/// Renders clip `index` of the dataset described by `cfg`.
pub fn synth_clip(cfg: &SynthConfig, index: usize) -> Result<SynthClip> {
    ensure!(!cfg.degree_bins.is_empty(), InvalidArgument, "no degree bins");
    let bin = index % cfg.degree_bins.len();
    let (lo, hi) = cfg.degree_bins[bin];
    ensure!(lo >= 1 && lo <= hi, InvalidArgument, "invalid degree bin ({lo}, {hi})");
    ensure!(
        hi <= NUM_CLASSES,
        InvalidArgument,
        "degree {hi} exceeds the {NUM_CLASSES}-class inventory"
    );
    ensure!(cfg.clip_s > 0.0 && cfg.sample_rate > 0, InvalidArgument, "clip length and rate must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SYNTH_TAG, index as u64, 0));
    let k = rng.random_range(lo..=hi);
    let mut classes: Vec<usize> = rand::seq::index::sample(&mut rng, NUM_CLASSES, k).into_vec();
    classes.sort_unstable();
    let events: Vec<SynthEvent> = classes.iter().map(|&c| sample_event(c, cfg.clip_s, &mut rng)).collect();
    let n = (cfg.clip_s * cfg.sample_rate as f64).round() as usize;
    let normal = rand_distr::Normal::new(0.0, BACKGROUND_STD).expect("valid std");
    let mut samples: Vec<f32> = (0..n).map(|_| rng.sample(normal) as f32).collect();
    for e in &events {
        render_event(e, cfg.sample_rate, &mut samples, &mut rng);
    }
    let peak = samples.iter().fold(0f32, |m, v| m.max(v.abs()));
    if peak > 0.9 {
        let s = 0.9 / peak;
        samples.iter_mut().for_each(|v| *v *= s);
    }
    let mut labels = vec![0u8; NUM_CLASSES];
    for &c in &classes {
        labels[c] = 1;
    }
    Ok(SynthClip {
        id: format!("clip_{index:05}"),
        bin,
        events,
        labels,
        waveform: Waveform::new(samples, cfg.sample_rate)?,
    })
}

pub fn synth_polyphonic_dataset(cfg: &SynthConfig) -> Result<Vec<SynthClip>> {
    (0..cfg.n_clips).map(|i| synth_clip(cfg, i)).collect()
}

/// Writes every clip as WAV plus `manifest.jsonl` (with multi-hot labels)
/// and `events.jsonl` into `dir`.
pub fn write_dataset(dir: &Path, clips: &[SynthClip]) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(clips.len());
    let mut events = String::new();
    for c in clips {
        let name = format!("{}.wav", c.id);
        write_wav(&dir.join(&name), &c.waveform)?;
        entries.push(ManifestEntry {
            path: name.into(),
            duration: c.waveform.duration_s(),
            labels: Some(c.labels.clone()),
        });
        let rec = serde_json::json!({ "id": c.id, "bin": c.bin, "events": c.events });
        events.push_str(&rec.to_string());
        events.push('\n');
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.save(&dir.join("manifest.jsonl"))?;
    let ev = dir.join("events.jsonl");
    std::fs::write(&ev, events).map_err(|e| Error::io(&ev, e))?;
    Ok(manifest)
}

/// Parses `"2-3,6-7"` into degree bins.
pub fn parse_degree_bins(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|part| {
            let part = part.trim();
            let (a, b) = part.split_once('-').unwrap_or((part, part));
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad degree bin {part:?}")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{log_mel, mel_centers, MelConfig};

    fn rec(id: &str, children: &[&str]) -> OntologyRecord {
        OntologyRecord {
            id: id.into(),
            name: id.into(),
            child_ids: children.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_cases() {
        let o = Ontology::from_records(&[rec("a", &[])]).unwrap();
        assert!(o.id_to_parent.is_empty() && o.id_to_children.is_empty());
        let o = Ontology::from_records(&[rec("a", &["b"]), rec("b", &["c"]), rec("c", &[])]).unwrap();
        assert_eq!(o.id_to_parent["c"], set(&["b"]));
        assert_eq!(o.id_to_children["a"], set(&["b"]));
        assert!(Ontology::from_records(&[rec("a", &["b"]), rec("b", &["a"])]).is_err());
        assert!(Ontology::from_records(&[rec("a", &["a"])]).is_err());
        assert!(Ontology::from_records(&[rec("a", &["zz"])]).is_err());
        assert!(Ontology::from_records(&[rec("a", &[]), rec("a", &[])]).is_err());
        let json = r#"[{"id":"/m/1","name":"x","child_ids":["/m/2"],"restrictions":[]},{"id":"/m/2","name":"y","child_ids":[]}]"#;
        assert_eq!(Ontology::parse(json).unwrap().id_to_parent["/m/2"], set(&["/m/1"]));
    }

    #[test]
    fn maps_match_adjacency_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let n = 12;
            // edges only from lower to higher index: a DAG
            let mut adj = vec![BTreeSet::new(); n];
            for (i, row) in adj.iter_mut().enumerate() {
                for j in i + 1..n {
                    if rng.random_bool(0.2) {
                        row.insert(j);
                    }
                }
            }
            let name = |i: usize| format!("n{i:02}");
            let recs: Vec<OntologyRecord> = (0..n)
                .map(|i| OntologyRecord {
                    id: name(i),
                    name: String::new(),
                    child_ids: adj[i].iter().map(|&j| name(j)).collect(),
                })
                .collect();
            let o = Ontology::from_records(&recs).unwrap();
            for i in 0..n {
                let kids: BTreeSet<String> = adj[i].iter().map(|&j| name(j)).collect();
                assert_eq!(o.id_to_children.get(&name(i)).cloned().unwrap_or_default(), kids);
                let parents: BTreeSet<String> = (0..n).filter(|&p| adj[p].contains(&i)).map(name).collect();
                assert_eq!(o.id_to_parent.get(&name(i)).cloned().unwrap_or_default(), parents);
            }
        }
    }

    #[test]
    fn related_and_distinct() {
        let o = Ontology::from_records(&[rec("a", &["b"]), rec("b", &["c"]), rec("c", &[]), rec("x", &[])]).unwrap();
        assert!(related_labels("x", 1, &o).unwrap().is_empty());
        assert_eq!(related_labels("c", 1, &o).unwrap(), set(&["b"]));
        assert_eq!(related_labels("c", 2, &o).unwrap(), set(&["a", "b"]));
        assert_eq!(related_labels("a", 2, &o).unwrap(), set(&["b", "c"]));
        assert!(related_labels("c", 0, &o).is_err());
        assert!(related_labels("q", 1, &o).is_err());
        assert_eq!(distinct_event_count(&set(&["a", "b"]), 1, &o).unwrap(), 1);
        assert_eq!(distinct_event_count(&set(&["a", "c"]), 1, &o).unwrap(), 2);
        assert_eq!(distinct_event_count(&set(&["a", "c"]), 2, &o).unwrap(), 1);
        assert_eq!(distinct_event_count(&set(&["c", "x"]), 4, &o).unwrap(), 2);
        assert!(distinct_event_count(&set(&["nope"]), 1, &o).is_err());
        let clips = vec![
            LabeledClip {
                id: "1".into(),
                labels: set(&["a", "c"]),
            },
            LabeledClip {
                id: "2".into(),
                labels: set(&["x"]),
            },
        ];
        assert_eq!(polyphony_percentage(&clips, 1, &o).unwrap(), 50.0);
        assert_eq!(polyphony_percentage(&clips, 2, &o).unwrap(), 0.0);
        assert!(polyphony_percentage(&[], 1, &o).is_err());
    }

    fn cfg(bins: Vec<(usize, usize)>) -> SynthConfig {
        SynthConfig {
            n_clips: 12,
            degree_bins: bins,
            clip_s: 2.0,
            sample_rate: 16000,
            seed: 5,
        }
    }

    #[test]
    fn synth_labels_and_determinism() {
        let a = synth_polyphonic_dataset(&cfg(vec![(2, 3), (6, 7)])).unwrap();
        let b = synth_polyphonic_dataset(&cfg(vec![(2, 3), (6, 7)])).unwrap();
        assert_eq!(a, b);
        for c in &a {
            let k: usize = c.labels.iter().map(|&v| v as usize).sum();
            let (lo, hi) = [(2, 3), (6, 7)][c.bin];
            assert!((lo..=hi).contains(&k));
            let from_events: BTreeSet<usize> = c.events.iter().map(|e| e.class).collect();
            let from_labels: BTreeSet<usize> = (0..NUM_CLASSES).filter(|&i| c.labels[i] == 1).collect();
            assert_eq!(from_events, from_labels);
            for e in &c.events {
                assert!(e.offset() <= 2.0 + 1e-9 && e.gain > 0.0 && e.gain <= 1.0);
            }
        }
        assert!(synth_clip(&cfg(vec![(15, 17)]), 0).is_err());
        assert_eq!(parse_degree_bins("2-3, 6-7,4").unwrap(), vec![(2, 3), (6, 7), (4, 4)]);
    }

    #[test]
    fn events_show_up_in_their_band() {
        let mel = MelConfig::default();
        let centers = mel_centers(&mel);
        let c = cfg(vec![(3, 4)]);
        for i in 0..6 {
            let clip = synth_clip(&c, i).unwrap();
            let s = log_mel(&clip.waveform, &mel).unwrap();
            let power = s.data().mapv(|v| (v as f64).exp());
            for e in &clip.events {
                let (lo, hi) = BANDS[e.band];
                let bins: Vec<usize> = (0..centers.len()).filter(|&b| centers[b] >= lo && centers[b] <= hi).collect();
                let hop = mel.hop_samples() as f64 / 16000.0;
                let f0 = ((e.onset + 0.05) / hop).ceil() as usize;
                let f1 = (((e.offset() - 0.05) / hop).floor() as usize).min(s.frames() - 1);
                let during: f64 = (f0..=f1)
                    .map(|t| bins.iter().map(|&b| power[[t, b]]).sum::<f64>())
                    .sum::<f64>()
                    / (f1 + 1 - f0) as f64;
                // background noise at this level gives about 1e-4 per band
                assert!(during > 1e-1, "clip {i} class {} band power {during}", e.class);
            }
        }
    }
}

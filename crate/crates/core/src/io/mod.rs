//! On-disk formats: match directories, checkpoints and prediction lists.

mod tensor_file;

pub use tensor_file::{
    decode_tensor, encode_tensor, read_tensor, write_tensor, TensorFileError, MAGIC, VERSION,
};

use crate::eval::Prediction;
use crate::model::{DstModel, InputNorm, ModelConfig};
use crate::nn::{OptimizerState, Parameter, Tensor};
use crate::noise::{LogitCube, CUBE_CLASSES};
use crate::pipeline::{InferDiagnostics, MatchData, TrainConfig, TrainState};
use crate::repr::{encoder_width, match_states};
use crate::sim::{Category, EventRecord, MatchGroundTruth, Pause, PlayerTrack, RoleId, N_SLOTS};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const TRACK_FEATURES: usize = 6;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Tensor {
        path: PathBuf,
        source: TensorFileError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Schema { path: PathBuf, msg: String },
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.to_path_buf(),
        source,
    }
}

fn schema(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Schema {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(fs_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(fs_err(path))
}

fn read_tensor_at(path: &Path) -> Result<Tensor, IoError> {
    read_tensor(path)
        .map(|(_, t)| t)
        .map_err(|source| IoError::Tensor {
            path: path.to_path_buf(),
            source,
        })
}

fn write_tensor_at(path: &Path, name: &str, t: &Tensor) -> Result<(), IoError> {
    write_tensor(path, name, t).map_err(|source| IoError::Tensor {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventJson {
    pub frame: usize,
    pub category: Category,
    pub team: u8,
    pub role_rank: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchFile {
    pub version: u32,
    pub fps: u32,
    pub n_frames: usize,
    pub pauses: Vec<[usize; 2]>,
    pub events: Vec<EventJson>,
    /// Tracks tensor `[26, n_frames, 6]` relative to the JSON file.
    pub tracks_ref: String,
    /// Detector logits `[n_frames, 26, 9]`, present after corruption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits_ref: Option<String>,
}

/// A match loaded from disk.
#[derive(Clone, Debug)]
pub struct StoredMatch {
    pub name: String,
    pub truth: MatchGroundTruth,
    pub cube: Option<LogitCube>,
}

fn match_name(i: usize) -> String {
    format!("match_{i:04}")
}

fn tracks_tensor(gt: &MatchGroundTruth) -> Tensor {
    let n = gt.n_frames;
    let mut data = Vec::with_capacity(N_SLOTS * n * TRACK_FEATURES);
    for t in &gt.tracks {
        for f in 0..n {
            let b = |v: bool| if v { 1.0 } else { 0.0 };
            data.extend_from_slice(&[
                t.x[f],
                t.y[f],
                t.vx[f],
                t.vy[f],
                b(t.visible[f]),
                b(t.occupied[f]),
            ]);
        }
    }
    Tensor::new(vec![N_SLOTS, n, TRACK_FEATURES], data).expect("sized above")
}

fn tracks_from_tensor(t: &Tensor, n: usize, path: &Path) -> Result<Vec<PlayerTrack>, IoError> {
    if t.shape() != [N_SLOTS, n, TRACK_FEATURES] {
        return Err(schema(
            path,
            format!(
                "tracks shape {:?}, expected [{N_SLOTS}, {n}, {TRACK_FEATURES}]",
                t.shape()
            ),
        ));
    }
    let d = t.data();
    let mut tracks = Vec::with_capacity(N_SLOTS);
    for s in 0..N_SLOTS {
        let mut tr = PlayerTrack::with_len(n);
        for f in 0..n {
            let row = &d[(s * n + f) * TRACK_FEATURES..(s * n + f + 1) * TRACK_FEATURES];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(schema(
                    path,
                    format!("non-finite track value at slot {s}, frame {f}"),
                ));
            }
            tr.x[f] = row[0];
            tr.y[f] = row[1];
            tr.vx[f] = row[2];
            tr.vy[f] = row[3];
            tr.visible[f] = row[4] > 0.5;
            tr.occupied[f] = row[5] > 0.5;
        }
        tracks.push(tr);
    }
    Ok(tracks)
}

/// Write `<dir>/<name>.json` and its tracks (and logits, when given).
pub fn write_match(
    dir: &Path,
    name: &str,
    gt: &MatchGroundTruth,
    cube: Option<&LogitCube>,
) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(fs_err(dir))?;
    let tracks_ref = format!("{name}.tracks.pdtn");
    write_tensor_at(&dir.join(&tracks_ref), "tracks", &tracks_tensor(gt))?;
    let logits_ref = match cube {
        Some(c) => {
            let r = format!("{name}.logits.pdtn");
            let t = Tensor::new(c.shape().to_vec(), c.values().to_vec()).expect("cube shape");
            write_tensor_at(&dir.join(&r), "logits", &t)?;
            Some(r)
        }
        None => None,
    };
    let file = MatchFile {
        version: FORMAT_VERSION,
        fps: gt.fps,
        n_frames: gt.n_frames,
        pauses: gt.pauses.iter().map(|p| [p.start, p.end]).collect(),
        events: gt
            .events
            .iter()
            .map(|e| EventJson {
                frame: e.frame,
                category: e.category,
                team: e.actor.team,
                role_rank: e.actor.role_rank,
            })
            .collect(),
        tracks_ref,
        logits_ref,
    };
    write_json(&dir.join(format!("{name}.json")), &file)
}

/// Read one match JSON, validating the schema before loading tensors.
pub fn read_match(path: &Path) -> Result<StoredMatch, IoError> {
    let file: MatchFile = read_json(path)?;
    if file.version != FORMAT_VERSION {
        return Err(schema(
            path,
            format!("unsupported version {}", file.version),
        ));
    }
    let n = file.n_frames;
    if n == 0 || file.fps == 0 {
        return Err(schema(path, "n_frames and fps must be positive"));
    }
    let mut last = 0;
    let mut events = Vec::with_capacity(file.events.len());
    for e in &file.events {
        if e.frame >= n || e.frame < last {
            return Err(schema(
                path,
                format!("event frame {} out of order or beyond {n} frames", e.frame),
            ));
        }
        last = e.frame;
        let actor = RoleId {
            team: e.team,
            role_rank: e.role_rank,
        };
        if !actor.is_valid() {
            return Err(schema(
                path,
                format!("invalid role team {} rank {}", e.team, e.role_rank),
            ));
        }
        events.push(EventRecord {
            frame: e.frame,
            category: e.category,
            actor,
        });
    }
    let mut pauses = Vec::with_capacity(file.pauses.len());
    for &[start, end] in &file.pauses {
        if start >= end || end > n {
            return Err(schema(path, format!("bad pause [{start}, {end})")));
        }
        pauses.push(Pause { start, end });
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let tracks = tracks_from_tensor(&read_tensor_at(&dir.join(&file.tracks_ref))?, n, path)?;
    let cube = match &file.logits_ref {
        Some(r) => {
            let p = dir.join(r);
            let t = read_tensor_at(&p)?;
            if t.shape() != [n, N_SLOTS, CUBE_CLASSES] {
                return Err(schema(&p, format!("logits shape {:?}", t.shape())));
            }
            let cube = LogitCube::from_values(n, t.into_data()).expect("shape checked");
            if !cube.is_finite() {
                return Err(schema(&p, "non-finite logits"));
            }
            Some(cube)
        }
        None => None,
    };
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("match")
        .to_string();
    Ok(StoredMatch {
        name,
        truth: MatchGroundTruth {
            n_frames: n,
            fps: file.fps,
            tracks,
            events,
            pauses,
        },
        cube,
    })
}

/// Every `*.json` match in `dir`, sorted by file name.
pub fn read_match_dir(dir: &Path) -> Result<Vec<StoredMatch>, IoError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(fs_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(schema(dir, "no match files"));
    }
    paths.iter().map(|p| read_match(p)).collect()
}

pub fn write_match_dir(
    dir: &Path,
    matches: &[(MatchGroundTruth, Option<LogitCube>)],
) -> Result<Vec<String>, IoError> {
    matches
        .iter()
        .enumerate()
        .map(|(i, (gt, cube))| {
            let name = match_name(i);
            write_match(dir, &name, gt, cube.as_ref())?;
            Ok(name)
        })
        .collect()
}

/// Model inputs for stored matches; every match must carry logits.
pub fn match_data(dir: &Path, stored: &[StoredMatch]) -> Result<Vec<MatchData>, IoError> {
    stored
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let cube = m
                .cube
                .clone()
                .ok_or_else(|| schema(dir, format!("{} has no detector logits", m.name)))?;
            Ok(MatchData {
                id: i,
                cube,
                states: match_states(&m.truth),
                events: m.truth.events.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub is_bias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Epochs completed.
    pub epoch: usize,
    /// Sampling and dropout streams are derived from the seed and epoch,
    /// so these two values are the complete generator state.
    pub rng_seed: u64,
    pub next_epoch: usize,
    pub optimizer_steps: u64,
    pub params: Vec<ParamEntry>,
    /// Files holding the encoder feature shift and scale, when fitted.
    #[serde(default)]
    pub input_norm: Option<[String; 2]>,
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn save_checkpoint(
    dir: &Path,
    model: &DstModel,
    train: &TrainConfig,
    state: &TrainState,
) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(fs_err(dir))?;
    let mut entries = Vec::with_capacity(model.params.len());
    for (i, p) in model.params.iter().enumerate() {
        let file = format!("{}.pdtn", file_safe(&p.name));
        write_tensor_at(&dir.join(&file), &p.name, &p.tensor)?;
        write_tensor_at(
            &dir.join(format!("adam_m.{file}")),
            &p.name,
            &state.optimizer.first_moment[i],
        )?;
        write_tensor_at(
            &dir.join(format!("adam_v.{file}")),
            &p.name,
            &state.optimizer.second_moment[i],
        )?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            file,
            shape: p.tensor.shape().to_vec(),
            is_bias: p.is_bias,
        });
    }
    let input_norm = match &model.input_norm {
        Some(n) => {
            let files = [
                "input_norm.shift.pdtn".to_string(),
                "input_norm.scale.pdtn".to_string(),
            ];
            for (f, (name, v)) in files.iter().zip([
                ("input_norm.shift", &n.shift),
                ("input_norm.scale", &n.scale),
            ]) {
                write_tensor_at(
                    &dir.join(f),
                    name,
                    &Tensor::new(vec![v.len()], v.clone()).expect("1-d"),
                )?;
            }
            Some(files)
        }
        None => None,
    };
    let manifest = CheckpointManifest {
        version: FORMAT_VERSION,
        model: model.config.clone(),
        train: train.clone(),
        epoch: state.next_epoch,
        rng_seed: train.seed,
        next_epoch: state.next_epoch,
        optimizer_steps: state.optimizer.step_count,
        params: entries,
        input_norm,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(DstModel, TrainConfig, TrainState), IoError> {
    let mpath = dir.join("manifest.json");
    let m: CheckpointManifest = read_json(&mpath)?;
    if m.version != FORMAT_VERSION {
        return Err(schema(&mpath, format!("unsupported version {}", m.version)));
    }
    let mut params = Vec::with_capacity(m.params.len());
    let mut first = Vec::with_capacity(m.params.len());
    let mut second = Vec::with_capacity(m.params.len());
    for e in &m.params {
        let t = read_tensor_at(&dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(schema(
                &mpath,
                format!(
                    "{}: stored shape {:?}, manifest {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                ),
            ));
        }
        let moment = |prefix: &str| -> Result<Tensor, IoError> {
            let p = dir.join(format!("{prefix}.{}", e.file));
            if p.exists() {
                read_tensor_at(&p)
            } else {
                Ok(Tensor::zeros(e.shape.clone()))
            }
        };
        first.push(moment("adam_m")?);
        second.push(moment("adam_v")?);
        params.push(Parameter {
            name: e.name.clone(),
            tensor: t,
            is_bias: e.is_bias,
        });
    }
    let mut model =
        DstModel::from_parameters(m.model, params).map_err(|e| schema(&mpath, e.to_string()))?;
    if let Some([shift, scale]) = &m.input_norm {
        let width = encoder_width(model.config.context);
        let shift = read_tensor_at(&dir.join(shift))?.into_data();
        let scale = read_tensor_at(&dir.join(scale))?.into_data();
        if shift.len() != width || scale.len() != width {
            return Err(schema(
                &mpath,
                format!(
                    "input statistics of width {}, expected {width}",
                    shift.len()
                ),
            ));
        }
        model.input_norm = Some(InputNorm { shift, scale });
    }
    let optimizer = OptimizerState {
        step_count: m.optimizer_steps,
        first_moment: first,
        second_moment: second,
    };
    Ok((
        model,
        m.train,
        TrainState {
            optimizer,
            next_epoch: m.next_epoch,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPredictions {
    pub name: String,
    pub predictions: Vec<Prediction>,
    #[serde(default)]
    pub diagnostics: InferDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub version: u32,
    pub source: String,
    pub context: Option<usize>,
    pub matches: Vec<MatchPredictions>,
}

pub fn write_predictions(path: &Path, file: &PredictionFile) -> Result<(), IoError> {
    write_json(path, file)
}

pub fn read_predictions(path: &Path) -> Result<PredictionFile, IoError> {
    let f: PredictionFile = read_json(path)?;
    if f.version != FORMAT_VERSION {
        return Err(schema(path, format!("unsupported version {}", f.version)));
    }
    for m in &f.matches {
        for p in &m.predictions {
            if p.slot >= N_SLOTS || !(0.0..=1.0).contains(&p.confidence) {
                return Err(schema(path, format!("{}: bad prediction {p:?}", m.name)));
            }
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{corrupt_match, NoiseConfig};
    use crate::sim::{simulate_match, SimConfig};

    #[test]
    fn match_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gt = simulate_match(&SimConfig::with_frames(1200), 5).unwrap();
        let cube = corrupt_match(&gt, &NoiseConfig::default(), 5).unwrap();
        write_match(dir.path(), "m", &gt, Some(&cube)).unwrap();
        let back = read_match(&dir.path().join("m.json")).unwrap();
        assert_eq!(back.truth, gt);
        assert_eq!(back.cube.unwrap().values(), cube.values());
    }

    #[test]
    fn schema_violations_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let gt = simulate_match(&SimConfig::with_frames(1000), 1).unwrap();
        write_match(dir.path(), "m", &gt, None).unwrap();
        let path = dir.path().join("m.json");
        let mut f: MatchFile = read_json(&path).unwrap();
        f.events.reverse();
        write_json(&path, &f).unwrap();
        assert!(matches!(read_match(&path), Err(IoError::Schema { .. })));
        let text = fs::read_to_string(&path)
            .unwrap()
            .replacen("\"fps\"", "\"fps_typo\"", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(read_match(&path), Err(IoError::Json { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = crate::model::tiny_gradcheck_config();
        let mut model = DstModel::init(config.clone(), 9).unwrap();
        let w = crate::repr::encoder_width(config.context);
        model.input_norm = Some(InputNorm {
            shift: vec![0.5; w],
            scale: vec![2.0; w],
        });
        let mut state = TrainState::new(&model);
        state.next_epoch = 2;
        state.optimizer.step_count = 7;
        state.optimizer.first_moment[0].data_mut()[0] = 0.25;
        save_checkpoint(dir.path(), &model, &TrainConfig::default(), &state).unwrap();
        let (back, train, st) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(train, TrainConfig::default());
        assert_eq!(st.next_epoch, 2);
        assert_eq!(st.optimizer.step_count, 7);
        assert_eq!(st.optimizer.first_moment[0].data()[0], 0.25);
        for (a, b) in back.params.iter().zip(&model.params) {
            assert_eq!(a.tensor, b.tensor);
        }
        assert_eq!(back.input_norm, model.input_norm);
    }
}

//! On-disk layout of datasets and checkpoints.
//!
//! A dataset directory holds
//!
//! ```text
//! manifest.toml                 sizes, horizon, channels, V_max, γ, config hash, seed
//! sim_config.toml               the full simulator configuration
//! {train,val,test}_trajectories.cdt   N × T × 4  (volume, chemo, radio, concentration)
//! {train,val,test}_patients.cdt       N × 9      (id, stage, v0, ρ, α, β, β_c, active_len, terminal)
//! test_counterfactuals.cdt            N × (T−1) × 4 × S, NaN where a cell does not exist
//! ```
//!
//! Checkpoints are `"CDCK"`, a `u32` version, a `u64` header length, a JSON
//! header and then value / first-moment / second-moment `CDT1` tensors (f64)
//! for every parameter in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::assemble::CHANNELS;
use super::tensor_file::{DType, TensorFile};
use super::{config_hash, read_toml, write_atomic, write_toml};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{ScheduleSpec, TrainHyper, TrainState};
use crate::error::{CdmError, Result};
use crate::sim::{Patient, PatientParams, SimConfig, Terminal, Trajectory, TreatmentChoice};

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"CDCK";
const PATIENT_FIELDS: usize = 9;
const TRAJ_FIELDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub horizon: usize,
    pub features: usize,
    pub channels: Vec<String>,
    pub v_max: f64,
    pub gamma: f64,
    pub config_hash: String,
    pub seed: u64,
    pub truth_samples: usize,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != DATASET_VERSION {
            return Err(CdmError::Format(format!("unsupported dataset version {}", self.format_version)));
        }
        if self.channels.len() != self.features {
            return Err(CdmError::Format(format!(
                "{} channel names for {} features",
                self.channels.len(),
                self.features
            )));
        }
        Ok(())
    }
}

/// Ground-truth counterfactual draws for the test cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualSet {
    pub patients: usize,
    pub steps: usize,
    pub samples: usize,
    /// `patients × steps × 4 × samples`, NaN for cells that do not exist.
    pub data: Vec<f64>,
}

impl CounterfactualSet {
    pub fn from_cells(cells: &[Vec<[crate::sim::CounterfactualCell; 4]>], steps: usize, samples: usize) -> Self {
        let mut data = vec![f64::NAN; cells.len() * steps * 4 * samples];
        for (i, per_patient) in cells.iter().enumerate() {
            for (t, four) in per_patient.iter().enumerate().take(steps) {
                for cell in four {
                    let start = ((i * steps + t) * 4 + cell.choice.index()) * samples;
                    data[start..start + samples].copy_from_slice(&cell.samples[..samples]);
                }
            }
        }
        CounterfactualSet { patients: cells.len(), steps, samples, data }
    }

    /// Samples for `(patient index, step, choice)`, if that cell exists.
    pub fn cell(&self, patient: usize, t: usize, choice: TreatmentChoice) -> Option<&[f64]> {
        if patient >= self.patients || t >= self.steps {
            return None;
        }
        let start = ((patient * self.steps + t) * 4 + choice.index()) * self.samples;
        let s = &self.data[start..start + self.samples];
        if s.iter().any(|v| v.is_nan()) {
            None
        } else {
            Some(s)
        }
    }

    fn to_tensor(&self) -> TensorFile {
        TensorFile {
            dtype: DType::F32,
            dims: vec![self.patients, self.steps, 4, self.samples],
            data: self.data.clone(),
        }
    }

    fn from_tensor(t: TensorFile) -> Result<Self> {
        match t.dims[..] {
            [patients, steps, 4, samples] => Ok(CounterfactualSet { patients, steps, samples, data: t.data }),
            _ => Err(CdmError::Format(format!("counterfactual tensor has dims {:?}", t.dims))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sim: SimConfig,
    pub train: Vec<Patient>,
    pub val: Vec<Patient>,
    pub test: Vec<Patient>,
    pub counterfactuals: CounterfactualSet,
}

impl Dataset {
    /// Manifest describing cohorts simulated from `sim` with `seed`.
    pub fn manifest_for(sim: &SimConfig, sizes: [usize; 3], seed: u64, truth_samples: usize) -> DatasetManifest {
        DatasetManifest {
            format_version: DATASET_VERSION,
            train: sizes[0],
            val: sizes[1],
            test: sizes[2],
            horizon: sim.horizon,
            features: CHANNELS.len(),
            channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
            v_max: sim.v_max,
            gamma: sim.gamma_chemo,
            config_hash: config_hash(sim),
            seed,
            truth_samples,
        }
    }
}

fn cohort_tensors(patients: &[Patient], horizon: usize) -> (TensorFile, TensorFile) {
    let n = patients.len();
    let mut traj = vec![0.0; n * horizon * TRAJ_FIELDS];
    let mut meta = Vec::with_capacity(n * PATIENT_FIELDS);
    for (i, p) in patients.iter().enumerate() {
        let tr = &p.trajectory;
        for t in 0..tr.active_len {
            let row = &mut traj[(i * horizon + t) * TRAJ_FIELDS..(i * horizon + t + 1) * TRAJ_FIELDS];
            row.copy_from_slice(&[
                tr.volumes[t],
                tr.chemo_applied[t] as f64,
                tr.radio_applied[t] as f64,
                tr.chemo_conc[t],
            ]);
        }
        let pp = &p.params;
        meta.extend_from_slice(&[
            tr.id as f64,
            pp.stage as f64,
            pp.v0,
            pp.rho,
            pp.alpha,
            pp.beta,
            pp.beta_c,
            tr.active_len as f64,
            tr.terminal.code() as f64,
        ]);
    }
    (
        TensorFile { dtype: DType::F32, dims: vec![n, horizon, TRAJ_FIELDS], data: traj },
        TensorFile { dtype: DType::F32, dims: vec![n, PATIENT_FIELDS], data: meta },
    )
}

fn cohort_from_tensors(traj: &TensorFile, meta: &TensorFile) -> Result<Vec<Patient>> {
    let (n, horizon) = match (&traj.dims[..], &meta.dims[..]) {
        ([n, h, TRAJ_FIELDS], [m, PATIENT_FIELDS]) if n == m => (*n, *h),
        _ => {
            return Err(CdmError::Format(format!(
                "cohort tensors have dims {:?} and {:?}",
                traj.dims, meta.dims
            )))
        }
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let m = &meta.data[i * PATIENT_FIELDS..(i + 1) * PATIENT_FIELDS];
        let active_len = m[7] as usize;
        let terminal = Terminal::from_code(m[8] as u8)
            .ok_or_else(|| CdmError::Format(format!("unknown terminal code {}", m[8])))?;
        if active_len == 0 || active_len > horizon || !(1.0..=4.0).contains(&m[1]) {
            return Err(CdmError::Corruption(format!("patient row {i} is inconsistent: {m:?}")));
        }
        let rows = &traj.data[i * horizon * TRAJ_FIELDS..(i * horizon + active_len) * TRAJ_FIELDS];
        let col = |c: usize| rows.chunks_exact(TRAJ_FIELDS).map(move |r| r[c]);
        let trajectory = Trajectory {
            id: m[0] as usize,
            volumes: col(0).collect(),
            chemo_applied: col(1).map(|v| v as u8).collect(),
            radio_applied: col(2).map(|v| v as u8).collect(),
            chemo_conc: col(3).collect(),
            active_len,
            terminal,
        };
        let params = PatientParams { rho: m[3], alpha: m[4], beta: m[5], beta_c: m[6], stage: m[1] as u8, v0: m[2] };
        out.push(Patient { params, trajectory });
    }
    Ok(out)
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    ds.manifest.validate()?;
    for (name, cohort) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let (traj, meta) = cohort_tensors(cohort, ds.manifest.horizon);
        traj.write(&dir.join(format!("{name}_trajectories.cdt")))?;
        meta.write(&dir.join(format!("{name}_patients.cdt")))?;
    }
    ds.counterfactuals.to_tensor().write(&dir.join("test_counterfactuals.cdt"))?;
    write_toml(&dir.join("sim_config.toml"), &ds.sim)?;
    // The manifest goes last: its presence marks a complete dataset.
    write_toml(&dir.join("manifest.toml"), &ds.manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_toml(&dir.join("manifest.toml"))?;
    manifest.validate()?;
    let sim: SimConfig = read_toml(&dir.join("sim_config.toml"))?;
    if config_hash(&sim) != manifest.config_hash {
        return Err(CdmError::Corruption(format!(
            "{}: simulator config does not match the manifest hash",
            dir.display()
        )));
    }
    let load = |name: &str| -> Result<Vec<Patient>> {
        let traj = TensorFile::read(&dir.join(format!("{name}_trajectories.cdt")))?;
        let meta = TensorFile::read(&dir.join(format!("{name}_patients.cdt")))?;
        cohort_from_tensors(&traj, &meta)
    };
    let (train, val, test) = (load("train")?, load("val")?, load("test")?);
    let sizes = [train.len(), val.len(), test.len()];
    if sizes != [manifest.train, manifest.val, manifest.test] {
        return Err(CdmError::Corruption(format!("cohort sizes {sizes:?} disagree with the manifest")));
    }
    let counterfactuals = CounterfactualSet::from_tensor(TensorFile::read(&dir.join("test_counterfactuals.cdt"))?)?;
    if counterfactuals.patients != test.len() {
        return Err(CdmError::Corruption("counterfactual tensor does not cover the test cohort".into()));
    }
    Ok(Dataset { manifest, sim, train, val, test, counterfactuals })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    denoiser: DenoiserConfig,
    schedule: ScheduleSpec,
    hyper: TrainHyper,
    state: TrainState,
    adam_step: u64,
    params: Vec<ParamMeta>,
}

/// A model together with everything needed to resume its training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub schedule: ScheduleSpec,
    pub hyper: TrainHyper,
    pub state: TrainState,
}

pub fn checkpoint_bytes(ck: &Checkpoint) -> Vec<u8> {
    encode_checkpoint(&ck.model, &ck.schedule, &ck.hyper, &ck.state)
}

/// Serialises a checkpoint without first assembling a [`Checkpoint`].
pub fn encode_checkpoint(model: &Denoiser, schedule: &ScheduleSpec, hyper: &TrainHyper, state: &TrainState) -> Vec<u8> {
    let ps = &model.params;
    let header = CheckpointHeader {
        denoiser: model.config.clone(),
        schedule: *schedule,
        hyper: hyper.clone(),
        state: state.clone(),
        adam_step: ps.step,
        params: ps.params.iter().map(|p| ParamMeta { name: p.name.clone(), shape: p.shape.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serialises");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &ps.params {
        for buf in [&p.value, &p.m, &p.v] {
            TensorFile { dtype: DType::F64, dims: p.shape.clone(), data: buf.clone() }.write_into(&mut out);
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(CdmError::Corruption("checkpoint shorter than its fixed header".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CdmError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CdmError::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(CdmError::Corruption("checkpoint header truncated".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| CdmError::Format(format!("checkpoint header: {e}")))?;
    let mut model = Denoiser::new(header.denoiser.clone(), 0).map_err(|e| match e {
        CdmError::Config(m) => CdmError::Format(format!("checkpoint config: {m}")),
        other => other,
    })?;
    if model.params.params.len() != header.params.len() {
        return Err(CdmError::Format("checkpoint parameter list does not match its config".into()));
    }
    let mut rest = &body[len..];
    for (p, meta) in model.params.params.iter_mut().zip(&header.params) {
        if p.name != meta.name || p.shape != meta.shape {
            return Err(CdmError::Format(format!("checkpoint parameter {} does not match {}", meta.name, p.name)));
        }
        for slot in 0..3 {
            let (t, used) = TensorFile::parse(rest)?;
            rest = &rest[used..];
            if t.dims != p.shape {
                return Err(CdmError::Corruption(format!("tensor for {} has dims {:?}", p.name, t.dims)));
            }
            match slot {
                0 => p.value = t.data,
                1 => p.m = t.data,
                _ => p.v = t.data,
            }
        }
    }
    if !rest.is_empty() {
        return Err(CdmError::Corruption(format!("{} trailing bytes in checkpoint", rest.len())));
    }
    model.params.step = header.adam_step;
    Ok(Checkpoint { model, schedule: header.schedule, hyper: header.hyper, state: header.state })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CdmError::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{cohort_counterfactuals, generate_cohort};

    fn small_dataset() -> Dataset {
        let sim = SimConfig { horizon: 8, ..SimConfig::with_gamma(5.0) };
        let train = generate_cohort(&sim, 6, 1, 0).unwrap();
        let val = generate_cohort(&sim, 3, 1, 6).unwrap();
        let test = generate_cohort(&sim, 4, 1, 9).unwrap();
        let cells = cohort_counterfactuals(&test, &sim, 5, 2).unwrap();
        let counterfactuals = CounterfactualSet::from_cells(&cells, sim.horizon - 1, 5);
        let manifest = Dataset::manifest_for(&sim, [6, 3, 4], 1, 5);
        Dataset { manifest, sim, train, val, test, counterfactuals }
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    }

    #[test]
    fn dataset_rewrite_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &small_dataset()).unwrap();
        let read = read_dataset(a.path()).unwrap();
        write_dataset(b.path(), &read).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
        assert_eq!(read_dataset(b.path()).unwrap(), read);
    }

    #[test]
    fn counterfactual_cells_are_addressable() {
        let ds = small_dataset();
        let p = &ds.test[0].trajectory;
        assert!(ds.counterfactuals.cell(0, 0, TreatmentChoice::Both).is_some());
        assert!(ds.counterfactuals.cell(0, p.active_len - 1, TreatmentChoice::None).is_none());
    }

    #[test]
    fn tampered_sim_config_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset();
        write_dataset(dir.path(), &ds).unwrap();
        let other = SimConfig { noise_sd: 0.02, ..ds.sim.clone() };
        write_toml(&dir.path().join("sim_config.toml"), &other).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(CdmError::Corruption(_))));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = SimConfig::with_gamma(5.0);
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&SimConfig::with_gamma(6.0)));
    }

    fn small_checkpoint() -> Checkpoint {
        let cfg = DenoiserConfig { embed_dim: 8, num_heads: 2, ff_dim: 8, residual_layers: 1, encoder_cells: 1, ..Default::default() };
        let mut model = Denoiser::new(cfg, 3).unwrap();
        for p in &mut model.params.params {
            p.m.iter_mut().for_each(|m| *m = 0.25);
            p.v.iter_mut().for_each(|v| *v = 1.0 / 3.0);
        }
        model.params.step = 17;
        let hyper = TrainHyper::default();
        let state = TrainState::new(&hyper, 4);
        Checkpoint { model, schedule: ScheduleSpec::default(), hyper, state }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ck = small_checkpoint();
        let bytes = checkpoint_bytes(&ck);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);
        assert_eq!(back.model.params.step, 17);
        for (a, b) in ck.model.params.params.iter().zip(&back.model.params.params) {
            assert_eq!((&a.value, &a.m, &a.v), (&b.value, &b.m, &b.v));
        }
        assert_eq!(back.state, ck.state);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let bytes = checkpoint_bytes(&small_checkpoint());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad_magic), Err(CdmError::Format(_))));
        let mut bad_header = bytes.clone();
        bad_header[16] = b'#';
        assert!(matches!(checkpoint_from_bytes(&bad_header), Err(CdmError::Format(_))));
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]), Err(CdmError::Corruption(_))));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(checkpoint_from_bytes(&trailing), Err(CdmError::Corruption(_))));
    }
}

//! Versioned binary artifacts: scenario datasets and per-step checkpoints.
//!
//! Both formats are little-endian and fully documented in
//! `docs/FORMATS.md`. Values round-trip bit-exactly (`f64` stored as raw
//! IEEE-754 bits), which is what makes checkpoint resume and byte-level
//! reproducibility checks possible.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::consolidate::FisherDiag;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::proto::PrototypeStore;
use crate::scenario::{ImageSample, Scenario, ScenarioSpec, StepDataset, TestSample};
use crate::tensor::Tensor;
use crate::train::RunState;

const SCENARIO_MAGIC: &[u8; 8] = b"SEGLSCEN";
const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGLCKPT";
const STORE_TAG: &[u8; 4] = b"PSTO";
const FISHER_TAG: &[u8; 4] = b"FSHR";
pub const FORMAT_VERSION: u32 = 1;

fn put_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::format("length exceeds format limit"))?;
    w.write_u32::<LE>(n)?;
    Ok(())
}

fn get_len<R: Read>(r: &mut R) -> Result<usize> {
    Ok(r.read_u32::<LE>()? as usize)
}

fn put_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LE>(&mut out)?;
    Ok(out)
}

fn put_labels<W: Write>(w: &mut W, labels: &[usize]) -> Result<()> {
    for &l in labels {
        let l = u16::try_from(l).map_err(|_| Error::format("class id exceeds format limit"))?;
        w.write_u16::<LE>(l)?;
    }
    Ok(())
}

fn get_labels<R: Read>(r: &mut R, n: usize, max_id: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let l = r.read_u16::<LE>()? as usize;
        if l > max_id {
            return Err(Error::format(format!("class id {l} out of range")));
        }
        out.push(l);
    }
    Ok(out)
}

fn check_header<R: Read>(r: &mut R, magic: &[u8; 8], what: &str) -> Result<()> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(Error::format(format!("not a {what} file (bad magic)")));
    }
    let version = r.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported {what} format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

fn put_spec<W: Write>(w: &mut W, spec: &ScenarioSpec) -> Result<()> {
    put_len(w, spec.total_classes)?;
    put_len(w, spec.schedule.len())?;
    for &k in &spec.schedule {
        put_len(w, k)?;
    }
    put_len(w, spec.images_per_step)?;
    put_len(w, spec.test_images)?;
    put_len(w, spec.height)?;
    put_len(w, spec.width)?;
    put_len(w, spec.feature_dim)?;
    w.write_f64::<LE>(spec.class_separation)?;
    w.write_f64::<LE>(spec.noise_sigma)?;
    Ok(())
}

fn get_spec<R: Read>(r: &mut R) -> Result<ScenarioSpec> {
    let total_classes = get_len(r)?;
    let schedule = (0..get_len(r)?)
        .map(|_| get_len(r))
        .collect::<Result<Vec<_>>>()?;
    let spec = ScenarioSpec {
        total_classes,
        schedule,
        images_per_step: get_len(r)?,
        test_images: get_len(r)?,
        height: get_len(r)?,
        width: get_len(r)?,
        feature_dim: get_len(r)?,
        class_separation: r.read_f64::<LE>()?,
        noise_sigma: r.read_f64::<LE>()?,
    };
    spec.validate()
        .map_err(|e| Error::format(format!("invalid embedded scenario spec: {e}")))?;
    Ok(spec)
}

pub fn write_scenario(path: &Path, sc: &Scenario) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SCENARIO_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    put_spec(&mut w, &sc.spec)?;
    w.write_u64::<LE>(sc.seed)?;

    put_len(&mut w, sc.class_means.len())?;
    put_len(&mut w, sc.spec.feature_dim)?;
    for mean in &sc.class_means {
        put_f64s(&mut w, mean)?;
    }

    put_len(&mut w, sc.steps.len())?;
    for step in &sc.steps {
        put_len(&mut w, step.step)?;
        put_len(&mut w, step.class_set.len())?;
        for &c in &step.class_set {
            put_len(&mut w, c)?;
        }
        put_len(&mut w, step.images.len())?;
        for img in &step.images {
            put_f64s(&mut w, img.features.data())?;
            put_labels(&mut w, &img.gt_full)?;
            put_labels(&mut w, &img.gt_step)?;
        }
    }

    put_len(&mut w, sc.test_set.len())?;
    for sample in &sc.test_set {
        put_f64s(&mut w, sample.features.data())?;
        put_labels(&mut w, &sample.gt_full)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let mut r = BufReader::new(File::open(path)?);
    check_header(&mut r, SCENARIO_MAGIC, "scenario")?;
    let spec = get_spec(&mut r)?;
    let seed = r.read_u64::<LE>()?;

    let n_means = get_len(&mut r)?;
    let dim = get_len(&mut r)?;
    if n_means != spec.total_classes + 1 || dim != spec.feature_dim {
        return Err(Error::format(
            "class-mean table does not match the scenario header",
        ));
    }
    let class_means = (0..n_means)
        .map(|_| get_f64s(&mut r, dim))
        .collect::<Result<Vec<_>>>()?;

    let pixels = spec.height * spec.width;
    let feat_shape = vec![spec.height, spec.width, spec.feature_dim];
    let n_steps = get_len(&mut r)?;
    if n_steps != spec.num_steps() {
        return Err(Error::format("step count does not match the schedule"));
    }
    let mut steps = Vec::with_capacity(n_steps);
    for t in 0..n_steps {
        let step = get_len(&mut r)?;
        if step != t {
            return Err(Error::format("steps out of order"));
        }
        let class_set = (0..get_len(&mut r)?)
            .map(|_| get_len(&mut r))
            .collect::<Result<Vec<_>>>()?;
        if class_set != spec.classes_introduced_at(t) {
            return Err(Error::format("step class set does not match the schedule"));
        }
        let n_images = get_len(&mut r)?;
        let mut images = Vec::with_capacity(n_images);
        for _ in 0..n_images {
            let features = Tensor::new(feat_shape.clone(), get_f64s(&mut r, pixels * dim)?)?;
            let gt_full = get_labels(&mut r, pixels, spec.total_classes)?;
            let gt_step = get_labels(&mut r, pixels, spec.total_classes)?;
            images.push(ImageSample {
                features,
                gt_full,
                gt_step,
            });
        }
        steps.push(StepDataset {
            step,
            class_set,
            images,
        });
    }

    let n_test = get_len(&mut r)?;
    let mut test_set = Vec::with_capacity(n_test);
    for _ in 0..n_test {
        let features = Tensor::new(feat_shape.clone(), get_f64s(&mut r, pixels * dim)?)?;
        let gt_full = get_labels(&mut r, pixels, spec.total_classes)?;
        test_set.push(TestSample { features, gt_full });
    }

    Ok(Scenario {
        spec,
        seed,
        class_means,
        steps,
        test_set,
    })
}

fn put_store<W: Write>(w: &mut W, store: &PrototypeStore) -> Result<()> {
    w.write_all(STORE_TAG)?;
    put_len(w, store.prototypes.len())?;
    for (&c, v) in &store.prototypes {
        put_len(w, c)?;
        put_len(w, v.len())?;
        put_f64s(w, v)?;
    }
    match &store.bg_prototype {
        Some(v) => {
            w.write_u8(1)?;
            put_len(w, v.len())?;
            put_f64s(w, v)?;
        }
        None => w.write_u8(0)?,
    }
    put_len(w, store.sigma_history.len())?;
    for (&t, &s) in &store.sigma_history {
        put_len(w, t)?;
        w.write_f64::<LE>(s)?;
    }
    put_len(w, store.class_counts.len())?;
    for (&t, &n) in &store.class_counts {
        put_len(w, t)?;
        put_len(w, n)?;
    }
    Ok(())
}

fn get_store<R: Read>(r: &mut R) -> Result<PrototypeStore> {
    let mut tag = [0u8; 4];
    r.read_exact(&mut tag)?;
    if &tag != STORE_TAG {
        return Err(Error::format("missing prototype-store section"));
    }
    let mut store = PrototypeStore::new();
    for _ in 0..get_len(r)? {
        let c = get_len(r)?;
        let dim = get_len(r)?;
        store.prototypes.insert(c, get_f64s(r, dim)?);
    }
    if r.read_u8()? == 1 {
        let dim = get_len(r)?;
        store.bg_prototype = Some(get_f64s(r, dim)?);
    }
    for _ in 0..get_len(r)? {
        let t = get_len(r)?;
        store.sigma_history.insert(t, r.read_f64::<LE>()?);
    }
    for _ in 0..get_len(r)? {
        let t = get_len(r)?;
        let n = get_len(r)?;
        store.class_counts.insert(t, n);
    }
    Ok(store)
}

/// Write the state reached after a completed step. The intra-step frozen
/// model is scratch and is not persisted; resuming re-freezes from the
/// stored model exactly as a fresh run would.
pub fn write_checkpoint(path: &Path, state: &RunState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u64::<LE>(state.seed)?;
    put_len(&mut w, state.step)?;

    let arch = state.model.architecture();
    put_len(&mut w, arch.input_dim)?;
    put_len(&mut w, arch.hidden.len())?;
    for &h in &arch.hidden {
        put_len(&mut w, h)?;
    }
    put_len(&mut w, arch.embed_dim)?;

    let rows = state.model.classifier_row_steps();
    put_len(&mut w, rows.len())?;
    for &s in &rows {
        put_len(&mut w, s)?;
    }
    put_len(&mut w, state.model.num_params())?;
    put_f64s(&mut w, state.model.params())?;

    put_store(&mut w, &state.store)?;

    w.write_all(FISHER_TAG)?;
    match &state.fisher {
        Some(f) => {
            w.write_u8(1)?;
            put_len(&mut w, f.values.len())?;
            put_f64s(&mut w, &f.values)?;
            w.write_u64::<LE>(f.sample_count)?;
        }
        None => w.write_u8(0)?,
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<RunState> {
    let mut r = BufReader::new(File::open(path)?);
    check_header(&mut r, CHECKPOINT_MAGIC, "checkpoint")?;
    let seed = r.read_u64::<LE>()?;
    let step = get_len(&mut r)?;

    let input_dim = get_len(&mut r)?;
    let hidden = (0..get_len(&mut r)?)
        .map(|_| get_len(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let embed_dim = get_len(&mut r)?;
    let arch = Architecture {
        input_dim,
        hidden,
        embed_dim,
    };

    let rows = (0..get_len(&mut r)?)
        .map(|_| get_len(&mut r))
        .collect::<Result<Vec<_>>>()?;
    let n_params = get_len(&mut r)?;
    let params = get_f64s(&mut r, n_params)?;
    let model = Model::from_parts(&arch, &rows, params)?;

    let store = get_store(&mut r)?;

    let mut tag = [0u8; 4];
    r.read_exact(&mut tag)?;
    if &tag != FISHER_TAG {
        return Err(Error::format("missing importance section"));
    }
    let fisher = if r.read_u8()? == 1 {
        let n = get_len(&mut r)?;
        let values = get_f64s(&mut r, n)?;
        let sample_count = r.read_u64::<LE>()?;
        Some(FisherDiag {
            values,
            sample_count,
        })
    } else {
        None
    };

    Ok(RunState {
        model,
        old_model: None,
        store,
        fisher,
        step,
        seed,
    })
}

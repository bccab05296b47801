//! Late-join integration: prototypes, classifier expansion and head-only
//! distillation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ServerError;
use crate::datastore::{ClassId, EmbeddingDataset};
use crate::nnkernel::{
    classifier_backward, classifier_logits, cross_entropy, encode, kd_kl, AdamWConfig,
    AdamWState, HeadParams, Tensor2,
};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the distillation term, λ_KD.
    pub kd_weight: f64,
    /// Weight of the cross-entropy term.
    pub ce_weight: f64,
    pub temperature: f64,
    pub optimizer: AdamWConfig,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            kd_weight: 0.5,
            ce_weight: 1.0,
            temperature: 2.0,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Loss trace of a distillation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KdReport {
    pub ce: Vec<f64>,
    pub kl: Vec<f64>,
}

impl KdReport {
    pub fn first_kl(&self) -> Option<f64> {
        self.kl.first().copied()
    }

    pub fn last_kl(&self) -> Option<f64> {
        self.kl.last().copied()
    }
}

/// Per-class mean of L2-normalized rows of `encoded`.
pub fn prototypes_from_encoded(
    encoded: &Tensor2,
    labels: &[ClassId],
) -> Result<BTreeMap<ClassId, Vec<f64>>, ServerError> {
    if encoded.rows() != labels.len() {
        return Err(ServerError::Protocol(format!(
            "{} labels for {} encodings",
            labels.len(),
            encoded.rows()
        )));
    }
    let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let row = encoded.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm <= 0.0 {
            return Err(ServerError::DegenerateEncoding { sample: i, class: label });
        }
        let (acc, n) = sums
            .entry(label)
            .or_insert_with(|| (vec![0.0; encoded.cols()], 0));
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v / norm;
        }
        *n += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (acc, n))| (c, acc.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Prototype of every class present in `pool`, using the current encoder.
pub fn compute_prototypes(
    pool: &EmbeddingDataset,
    params: &HeadParams,
) -> Result<BTreeMap<ClassId, Vec<f64>>, ServerError> {
    if pool.is_empty() {
        return Err(ServerError::Protocol("no samples to build prototypes from".into()));
    }
    let batch = pool.full_batch();
    let encoded = encode(params, &batch.features)?;
    prototypes_from_encoded(&encoded, &batch.labels)
}

/// Appends one classifier row per prototype (weight = prototype, bias = 0).
/// New class ids must continue the registry contiguously.
pub fn expand_classifier(
    params: &HeadParams,
    prototypes: &BTreeMap<ClassId, Vec<f64>>,
    registry: &[ClassId],
) -> Result<HeadParams, ServerError> {
    if registry.len() != params.n_classes() {
        return Err(ServerError::Registry(format!(
            "registry holds {} classes but the classifier has {} rows",
            registry.len(),
            params.n_classes()
        )));
    }
    let known: BTreeSet<ClassId> = registry.iter().copied().collect();
    let mut out = params.clone();
    let d_model = params.dims().d_model;
    for (i, (&class, proto)) in prototypes.iter().enumerate() {
        if known.contains(&class) {
            return Err(ServerError::Registry(format!("class {class} is already registered")));
        }
        let expected = (registry.len() + i) as ClassId;
        if class != expected {
            return Err(ServerError::Registry(format!(
                "new class {class} would land on classifier row {expected}"
            )));
        }
        if proto.len() != d_model {
            return Err(ServerError::Protocol(format!(
                "prototype of class {class} has {} entries, d_model is {d_model}",
                proto.len()
            )));
        }
        out.cls_w.push_row(proto)?;
        out.cls_b.push(0.0);
    }
    Ok(out)
}

/// Fine-tunes only the classifier: CE on `ce_pool` over all classes plus
/// `kd_weight` × KL between the teacher and the student's first `C_old`
/// logits on `old_pool`. Encoder and projection stay bitwise unchanged.
pub fn kd_finetune_head(
    params: &HeadParams,
    teacher: &HeadParams,
    ce_pool: &EmbeddingDataset,
    old_pool: &EmbeddingDataset,
    cfg: &KdConfig,
    seed: u64,
) -> Result<(HeadParams, KdReport), ServerError> {
    let c_old = teacher.n_classes();
    let c = params.n_classes();
    let (mut sd, td) = (params.dims(), teacher.dims());
    sd.n_classes = td.n_classes;
    if sd != td || c < c_old {
        return Err(ServerError::Protocol(format!(
            "teacher {:?} is not a prefix of student {:?}",
            teacher.dims(),
            params.dims()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(ServerError::Config("distillation batch size must be positive".into()));
    }
    let use_ce = cfg.ce_weight != 0.0 && !ce_pool.is_empty();
    let use_kd = cfg.kd_weight != 0.0 && !old_pool.is_empty() && c_old > 0;

    let new_batch = ce_pool.full_batch();
    let old_batch = old_pool.full_batch();
    let new_enc = if use_ce {
        encode(params, &new_batch.features)?
    } else {
        Tensor2::zeros(0, sd.d_model)
    };
    let (old_enc, teacher_logits) = if use_kd {
        let enc = encode(params, &old_batch.features)?;
        let t_enc = encode(teacher, &old_batch.features)?;
        let t_logits = classifier_logits(&teacher.cls_w, &teacher.cls_b, &t_enc);
        (enc, t_logits)
    } else {
        (Tensor2::zeros(0, sd.d_model), Tensor2::zeros(0, c_old))
    };

    let mut out = params.clone();
    let mut opt = AdamWState::new(cfg.optimizer, &[out.cls_w.data().len(), out.cls_b.len()]);
    let mut rng = seed::rng(seed, &[]);
    let mut report = KdReport::default();
    let mut new_idx: Vec<usize> = (0..new_enc.rows()).collect();
    let mut old_idx: Vec<usize> = (0..old_enc.rows()).collect();

    for _ in 0..cfg.epochs {
        new_idx.shuffle(&mut rng);
        old_idx.shuffle(&mut rng);
        let new_chunks: Vec<&[usize]> = new_idx.chunks(cfg.batch_size).collect();
        let old_chunks: Vec<&[usize]> = old_idx.chunks(cfg.batch_size).collect();
        let steps = new_chunks.len().max(old_chunks.len());
        for s in 0..steps {
            let mut enc_rows = Tensor2::zeros(0, sd.d_model);
            let mut dlogits = Tensor2::zeros(0, c);
            if use_ce {
                let idx = new_chunks[s % new_chunks.len()];
                let enc = gather(&new_enc, idx);
                let labels: Vec<ClassId> = idx.iter().map(|&i| new_batch.labels[i]).collect();
                let logits = classifier_logits(&out.cls_w, &out.cls_b, &enc);
                let (l, mut g) = cross_entropy(&logits, &labels)?;
                g.data_mut().iter_mut().for_each(|v| *v *= cfg.ce_weight);
                report.ce.push(l);
                enc_rows = enc;
                dlogits = g;
            }
            if use_kd {
                let idx = old_chunks[s % old_chunks.len()];
                let enc = gather(&old_enc, idx);
                let t = gather(&teacher_logits, idx);
                let student = classifier_logits(&out.cls_w, &out.cls_b, &enc).leading_cols(c_old);
                let (l, g_old) = kd_kl(&t, &student, cfg.temperature)?;
                let mut g = Tensor2::zeros(idx.len(), c);
                for i in 0..idx.len() {
                    for (dst, v) in g.row_mut(i).iter_mut().zip(g_old.row(i)) {
                        *dst = cfg.kd_weight * v;
                    }
                }
                report.kl.push(l);
                enc_rows = Tensor2::vstack(&enc_rows, &enc)?;
                dlogits = Tensor2::vstack(&dlogits, &g)?;
            }
            if enc_rows.rows() == 0 {
                continue;
            }
            let (dw, db) = classifier_backward(&enc_rows, &dlogits);
            opt.update(
                &mut [out.cls_w.data_mut(), out.cls_b.as_mut_slice()],
                &[dw.data(), db.as_slice()],
            )?;
        }
    }
    if !out.is_finite() {
        return Err(ServerError::Kernel(crate::nnkernel::KernelError::NonFinite(
            "classifier after distillation".into(),
        )));
    }
    Ok((out, report))
}

fn gather(t: &Tensor2, idx: &[usize]) -> Tensor2 {
    let mut out = Tensor2::zeros(0, t.cols());
    for &i in idx {
        out.push_row(t.row(i)).expect("same width");
    }
    out
}

//! The semi-supervised training engine: a supervised warm start followed
//! by teacher-student steps with mixed-mode pseudo-labelling.
//!
//! One step is a transaction: draw the step mode, generate pseudo-labels
//! from a read-only teacher snapshot on clean AV inputs, run the student
//! forward/backward on masked audio, visual, and audiovisual views of
//! both batches, combine per-modality losses into the weighted
//! semi-supervised objective, clip and apply the optimiser update, then
//! move the teacher by EMA. Per-sample work parallelises with
//! order-stable reduction, so metrics are bitwise identical for any
//! thread count.

mod ema;
mod losses;
mod optim;
mod pseudo;

pub use ema::{ema_update, tau_schedule};
pub use losses::{combine_semi, labelled_loss, unlabelled_loss, LossParams, ViewLoss};
pub use optim::{clip_global_norm, lr_schedule, zero_grads, AdamW, GradBuffers};
pub use pseudo::{generate_pls_for_sample, Mode, SamplePls, SkipReason};

use crate::autodiff::Tensor;
use crate::data::{Corpus, Sample, Split};
use crate::model::{Modality, ModelError, ModelParams};
use crate::parallel::map_ordered;
use crate::rng::SplitMix64;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("train io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::model::CheckpointError),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("non-finite loss at step {step} ({context})")]
    NonFinite { step: usize, context: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Probability of drawing the AR pseudo-labelling mode for a step.
    pub p_ar: f64,
    pub tau0_ema: f32,
    pub conf_threshold: f32,
    pub lambda_ctc: f64,
    pub label_smoothing: f64,
    pub dec_att_pl_weight: f64,
    pub ctc_att_pl_weight: f64,
    pub w_audio: f64,
    pub w_visual: f64,
    pub w_av: f64,
    pub gamma_audio: f64,
    pub gamma_visual: f64,
    pub gamma_av: f64,
    pub batch_labelled: usize,
    pub batch_unlabelled: usize,
    pub epochs: usize,
    /// Supervised-only epochs before unlabelled losses switch on
    /// (substitutes the self-supervised initialisation).
    pub warm_epochs: usize,
    pub warmup_frac: f64,
    pub peak_lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub grad_clip: f32,
    /// Student zero-masking span budgets (frames).
    pub mask_audio_max: usize,
    pub mask_visual_max: usize,
    pub seed: u64,
    pub threads: usize,
    /// When false, wall-time metrics are written as zero so metrics.csv
    /// is byte-identical across runs.
    pub timing: bool,
    /// Save intermediate checkpoints every N epochs (0 = final only).
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p_ar: 0.5,
            tau0_ema: 0.998,
            conf_threshold: 0.8,
            lambda_ctc: 0.1,
            label_smoothing: 0.1,
            dec_att_pl_weight: 0.5,
            ctc_att_pl_weight: 0.5,
            w_audio: 0.7,
            w_visual: 0.3,
            w_av: 0.7,
            gamma_audio: 0.75,
            gamma_visual: 0.97,
            gamma_av: 0.75,
            batch_labelled: 8,
            batch_unlabelled: 24,
            epochs: 50,
            warm_epochs: 20,
            warmup_frac: 0.3,
            peak_lr: 3e-3,
            weight_decay: 0.04,
            beta1: 0.9,
            beta2: 0.98,
            grad_clip: 3.0,
            mask_audio_max: 9,
            mask_visual_max: 6,
            seed: 42,
            threads: 1,
            timing: true,
            ckpt_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss_params(&self) -> LossParams {
        LossParams {
            lambda_ctc: self.lambda_ctc,
            label_smoothing: self.label_smoothing,
            dec_att_pl_weight: self.dec_att_pl_weight,
            ctc_att_pl_weight: self.ctc_att_pl_weight,
        }
    }

    pub fn modality_weights(&self) -> [f64; 3] {
        [self.w_audio, self.w_visual, self.w_av]
    }

    pub fn gammas(&self) -> [f64; 3] {
        [self.gamma_audio, self.gamma_visual, self.gamma_av]
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let unit = [
            ("p_ar", self.p_ar),
            ("lambda_ctc", self.lambda_ctc),
            ("label_smoothing", self.label_smoothing),
            ("dec_att_pl_weight", self.dec_att_pl_weight),
            ("ctc_att_pl_weight", self.ctc_att_pl_weight),
            ("w_audio", self.w_audio),
            ("w_visual", self.w_visual),
            ("w_av", self.w_av),
            ("gamma_audio", self.gamma_audio),
            ("gamma_visual", self.gamma_visual),
            ("gamma_av", self.gamma_av),
            ("warmup_frac", self.warmup_frac),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(TrainError::ConfigMismatch(format!(
                    "{name} = {v} outside [0, 1]"
                )));
            }
        }
        if self.batch_labelled == 0 || self.batch_unlabelled == 0 {
            return Err(TrainError::ConfigMismatch("batch sizes must be positive".into()));
        }
        if self.warm_epochs > self.epochs {
            return Err(TrainError::ConfigMismatch(format!(
                "warm_epochs {} exceeds epochs {}",
                self.warm_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

const ROLE_SHUFFLE_LAB: u64 = 0x7368_6c61;
const ROLE_SHUFFLE_UNLAB: u64 = 0x7368_756e;
const ROLE_MODE: u64 = 0x6d6f_6465;
const ROLE_MASK: u64 = 0x6d61_736b;

/// Draw one step mode: AR with probability p_ar, CTC-driven otherwise.
/// One draw per step, shared by the whole unlabelled batch.
pub fn sample_mode(rng: &mut SplitMix64, p_ar: f64) -> Mode {
    if rng.bernoulli(p_ar) {
        Mode::Ar
    } else {
        Mode::CtcDriven
    }
}

/// Zero one contiguous span of rows within a column range.
fn zero_span(
    frames: &mut [f32],
    rows: usize,
    width: usize,
    col_range: (usize, usize),
    max_span: usize,
    rng: &mut SplitMix64,
) {
    let span = rng.range_inclusive(1, max_span.min(rows) as u64) as usize;
    let start = rng.below((rows - span + 1) as u64) as usize;
    for r in start..start + span {
        for c in col_range.0..col_range.1 {
            frames[r * width + c] = 0.0;
        }
    }
}

/// Build the student's masked view of a sample. The audio view gets one
/// zero span of up to mask_audio_max frames, the visual view up to
/// mask_visual_max; the AV view masks both halves independently. Teacher
/// inputs never pass through here.
pub fn masked_view(
    sample: &Sample,
    modality: Modality,
    frame_dim: usize,
    cfg: &TrainConfig,
    step: usize,
    split: Split,
    index: usize,
) -> Tensor<f32> {
    let view_tag = match modality {
        Modality::Audio => 0u64,
        Modality::Visual => 1,
        Modality::AudioVisual => 2,
    };
    let split_tag = match split {
        Split::Labelled => 1u64,
        Split::Unlabelled => 2,
        Split::TestId => 3,
        Split::TestOod => 4,
    };
    let mut rng = SplitMix64::stream(
        cfg.seed,
        &[ROLE_MASK, step as u64, split_tag, index as u64, view_tag],
    );
    let rows = sample.frames;
    match modality {
        Modality::Audio => {
            let mut vals = sample.audio.clone();
            zero_span(&mut vals, rows, frame_dim, (0, frame_dim), cfg.mask_audio_max, &mut rng);
            Tensor::new(vec![rows, frame_dim], vals).expect("view shape")
        }
        Modality::Visual => {
            let mut vals = sample.visual.clone();
            zero_span(&mut vals, rows, frame_dim, (0, frame_dim), cfg.mask_visual_max, &mut rng);
            Tensor::new(vec![rows, frame_dim], vals).expect("view shape")
        }
        Modality::AudioVisual => {
            let mut vals = sample.av(frame_dim);
            let w = 2 * frame_dim;
            zero_span(&mut vals, rows, w, (0, frame_dim), cfg.mask_audio_max, &mut rng);
            zero_span(&mut vals, rows, w, (frame_dim, w), cfg.mask_visual_max, &mut rng);
            Tensor::new(vec![rows, w], vals).expect("view shape")
        }
    }
}

/// Everything a step reports into metrics.csv.
#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub mode: &'static str,
    pub lr: f32,
    pub tau: f32,
    pub loss_total: f64,
    pub loss_lab: [f64; 3],
    pub loss_unlab_ctc: [f64; 3],
    pub loss_unlab_att: [f64; 3],
    pub accept_rate_ctc: f64,
    pub accept_rate_att: f64,
    pub skip_count: usize,
    pub pl_wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,mode,lr,tau,loss_total,loss_lab_a,loss_lab_v,loss_lab_av,loss_unlab_ctc_a,loss_unlab_ctc_v,loss_unlab_ctc_av,loss_unlab_att_a,loss_unlab_att_v,loss_unlab_att_av,accept_rate_ctc,accept_rate_att,skip_count,pl_wall_ms";

impl StepMetrics {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.8},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.3}",
            self.step,
            self.epoch,
            self.mode,
            self.lr,
            self.tau,
            self.loss_total,
            self.loss_lab[0],
            self.loss_lab[1],
            self.loss_lab[2],
            self.loss_unlab_ctc[0],
            self.loss_unlab_ctc[1],
            self.loss_unlab_ctc[2],
            self.loss_unlab_att[0],
            self.loss_unlab_att[1],
            self.loss_unlab_att[2],
            self.accept_rate_ctc,
            self.accept_rate_att,
            self.skip_count,
            self.pl_wall_ms
        )
    }
}

fn view_modality(idx: usize) -> Modality {
    [Modality::Audio, Modality::Visual, Modality::AudioVisual][idx]
}

struct Job<'s> {
    sample: &'s Sample,
    index: usize,
    modality_idx: usize,
    pls: Option<&'s SamplePls>,
}

struct JobResult {
    modality_idx: usize,
    labelled: bool,
    combined_value: f64,
    ctc_value: f64,
    att_value: f64,
    infeasible_skips: usize,
    grads: Option<GradBuffers>,
}

/// A labelled and an unlabelled batch for one step. Unlabelled indices
/// are positions in the corpus' unlabelled split; references of
/// unlabelled samples are never read by the trainer.
pub struct StepInputs<'s> {
    pub labelled: Vec<(usize, &'s Sample)>,
    pub unlabelled: Vec<(usize, &'s Sample)>,
}

pub struct RunArtifacts {
    pub metrics_path: PathBuf,
    pub student_path: PathBuf,
    pub teacher_path: PathBuf,
}

/// Counters that back the alignment and amortisation invariants.
#[derive(Clone, Copy, Debug, Default)]
pub struct PlInstrumentation {
    pub events: u64,
    pub teacher_decoder_passes: u64,
    pub aligned_length_violations: u64,
    pub ctc_driven_events: u64,
    pub ar_events: u64,
}

pub struct Trainer<'a> {
    pub student: ModelParams<f32>,
    pub teacher: Option<ModelParams<f32>>,
    pub cfg: TrainConfig,
    corpus: &'a Corpus,
    opt: AdamW,
    steps_per_epoch: usize,
    total_steps: usize,
    unlab_order: Vec<usize>,
    unlab_cursor: usize,
    unlab_epoch: u64,
    semi_steps_taken: usize,
    pub instrumentation: PlInstrumentation,
}

impl<'a> Trainer<'a> {
    pub fn new(
        student: ModelParams<f32>,
        corpus: &'a Corpus,
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mcfg = &student.config;
        let ccfg = &corpus.config;
        if mcfg.content_vocab != ccfg.content_vocab || mcfg.frame_dim != ccfg.frame_dim {
            return Err(TrainError::ConfigMismatch(format!(
                "model (vocab {}, frame_dim {}) vs corpus (vocab {}, frame_dim {})",
                mcfg.content_vocab, mcfg.frame_dim, ccfg.content_vocab, ccfg.frame_dim
            )));
        }
        let longest_frames = ccfg
            .unlabelled_max_tokens
            .max(crate::data::OOD_BUCKETS[3].1)
            * ccfg.frames_per_token_max;
        if longest_frames > mcfg.max_frames {
            return Err(TrainError::ConfigMismatch(format!(
                "corpus can emit {longest_frames} frames but max_frames is {}",
                mcfg.max_frames
            )));
        }
        let steps_per_epoch = corpus.labelled.len().div_ceil(cfg.batch_labelled);
        let total_steps = steps_per_epoch * cfg.epochs;
        let opt = AdamW::new(&student, cfg.beta1, cfg.beta2, cfg.weight_decay);
        Ok(Trainer {
            student,
            teacher: None,
            cfg,
            corpus,
            opt,
            steps_per_epoch,
            total_steps,
            unlab_order: Vec::new(),
            unlab_cursor: 0,
            unlab_epoch: 0,
            semi_steps_taken: 0,
            instrumentation: PlInstrumentation::default(),
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    fn semi_steps(&self) -> usize {
        self.steps_per_epoch * (self.cfg.epochs - self.cfg.warm_epochs)
    }

    fn next_unlabelled_batch(&mut self) -> Vec<usize> {
        let n = self.corpus.unlabelled.len();
        let mut out = Vec::with_capacity(self.cfg.batch_unlabelled);
        while out.len() < self.cfg.batch_unlabelled {
            if self.unlab_cursor >= self.unlab_order.len() {
                self.unlab_order = (0..n).collect();
                let mut rng =
                    SplitMix64::stream(self.cfg.seed, &[ROLE_SHUFFLE_UNLAB, self.unlab_epoch]);
                rng.shuffle(&mut self.unlab_order);
                self.unlab_cursor = 0;
                self.unlab_epoch += 1;
            }
            out.push(self.unlab_order[self.unlab_cursor]);
            self.unlab_cursor += 1;
        }
        out
    }

    /// One optimisation step over the given batches.
    pub fn train_step(
        &mut self,
        step: usize,
        inputs: &StepInputs,
    ) -> Result<StepMetrics, TrainError> {
        let cfg = self.cfg.clone();
        let lp = cfg.loss_params();
        let semi = self.teacher.is_some();
        let epoch = step / self.steps_per_epoch;
        let frame_dim = self.corpus.config.frame_dim;

        // (1) one mode draw per step, shared across the batch
        let mode = if semi {
            let mut mode_rng = SplitMix64::stream(cfg.seed, &[ROLE_MODE, step as u64]);
            Some(sample_mode(&mut mode_rng, cfg.p_ar))
        } else {
            None
        };

        // (2) teacher pseudo-labels on clean AV inputs; one teacher
        // decode per sample supervises all three student views
        let pl_started = std::time::Instant::now();
        let pls: Vec<SamplePls> = if let Some(mode) = mode {
            let teacher = self.teacher.as_ref().unwrap();
            let results = map_ordered(&inputs.unlabelled, cfg.threads, |_, (_, s)| {
                generate_pls_for_sample(teacher, s, mode, cfg.conf_threshold)
            });
            results.into_iter().collect::<Result<_, _>>()?
        } else {
            Vec::new()
        };
        let pl_wall_ms = if cfg.timing {
            pl_started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };

        let mut skip_count = 0usize;
        let mut ctc_accepts = 0usize;
        let mut att_accepts = 0usize;
        let mut att_tokens = 0usize;
        let mut accepted = 0usize;
        for p in &pls {
            if p.skip.is_some() {
                skip_count += 1;
                continue;
            }
            accepted += 1;
            self.instrumentation.events += 1;
            self.instrumentation.teacher_decoder_passes += p.teacher_decoder_passes;
            match p.mode {
                Mode::CtcDriven => {
                    self.instrumentation.ctc_driven_events += 1;
                    if p.att_pl.len() != p.ctc_pl.len() {
                        self.instrumentation.aligned_length_violations += 1;
                    }
                }
                Mode::Ar => self.instrumentation.ar_events += 1,
            }
            ctc_accepts += usize::from(p.r_ctc);
            att_accepts += p.r_att.iter().filter(|&&b| b).count();
            att_tokens += p.r_att.len();
        }

        // (3) student jobs: every (sample, view) pair that can contribute
        let mut jobs: Vec<Job> = Vec::new();
        for &(index, sample) in &inputs.labelled {
            for m in 0..3 {
                jobs.push(Job {
                    sample,
                    index,
                    modality_idx: m,
                    pls: None,
                });
            }
        }
        for ((index, sample), p) in inputs.unlabelled.iter().zip(&pls) {
            if p.skip.is_some() || p.fully_masked() {
                continue;
            }
            for m in 0..3 {
                jobs.push(Job {
                    sample,
                    index: *index,
                    modality_idx: m,
                    pls: Some(p),
                });
            }
        }

        let student = &self.student;
        let results: Vec<Result<JobResult, ModelError>> =
            map_ordered(&jobs, cfg.threads, |_, job| {
                let modality = view_modality(job.modality_idx);
                let split = if job.pls.is_none() {
                    Split::Labelled
                } else {
                    Split::Unlabelled
                };
                let frames = masked_view(job.sample, modality, frame_dim, &cfg, step, split, job.index);
                let mut enc = student.encode(&frames, job.sample.frames, modality, true)?;
                let view_loss = match job.pls {
                    None => labelled_loss(&mut enc, &job.sample.tokens, &lp)?,
                    Some(p) => unlabelled_loss(&mut enc, p, &lp)?,
                };
                let grads = match view_loss.var {
                    Some(var) => {
                        enc.tape.backward(var)?;
                        let g: GradBuffers = (0..student.entries().len())
                            .map(|ei| enc.param_grad(ei).unwrap().to_vec())
                            .collect();
                        Some(g)
                    }
                    None => None,
                };
                let combined_value = view_loss
                    .var
                    .map_or(0.0, |v| enc.tape.value(v).values()[0] as f64);
                Ok(JobResult {
                    modality_idx: job.modality_idx,
                    labelled: job.pls.is_none(),
                    combined_value,
                    ctc_value: view_loss.ctc_value as f64,
                    att_value: view_loss.att_value as f64,
                    infeasible_skips: view_loss.infeasible_skips,
                    grads,
                })
            });

        // (4) combine into L_semi and accumulate coefficient-scaled
        // gradients in fixed job order
        let w = cfg.modality_weights();
        let gammas = if semi { cfg.gammas() } else { [0.0; 3] };
        let n_lab = inputs.labelled.len().max(1) as f64;
        let b_u = cfg.batch_unlabelled as f64;
        let mut lab_means = [0.0f64; 3];
        let mut unlab_means = [0.0f64; 3];
        let mut unlab_ctc = [0.0f64; 3];
        let mut unlab_att = [0.0f64; 3];
        let mut grad_total = zero_grads(&self.student);
        for r in results {
            let r = r?;
            let m = r.modality_idx;
            skip_count += r.infeasible_skips;
            let coeff = if r.labelled {
                lab_means[m] += r.combined_value / n_lab;
                w[m] * (1.0 - gammas[m]) / n_lab
            } else {
                unlab_means[m] += r.combined_value / b_u;
                unlab_ctc[m] += r.ctc_value / b_u;
                unlab_att[m] += r.att_value / b_u;
                w[m] * gammas[m] / b_u
            };
            if let Some(grads) = r.grads {
                let c = coeff as f32;
                for (gt, g) in grad_total.iter_mut().zip(&grads) {
                    for (a, b) in gt.iter_mut().zip(g) {
                        *a += c * b;
                    }
                }
            }
        }
        let loss_total = combine_semi(w, gammas, lab_means, unlab_means);
        if !loss_total.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                context: format!("lab {lab_means:?} unlab {unlab_means:?}"),
            });
        }

        // (5) clip, schedule, update
        clip_global_norm(&mut grad_total, cfg.grad_clip);
        let warmup_steps = (cfg.warmup_frac * self.total_steps as f64).round() as usize;
        let lr = lr_schedule(step, self.total_steps, warmup_steps, cfg.peak_lr);
        self.opt.step(&mut self.student, &grad_total, lr);

        // (6) EMA teacher update on the semi schedule: tau ramps from
        // tau0 at the first semi step to exactly 1.0 at the last
        let tau = if semi {
            let horizon = self.semi_steps().saturating_sub(1);
            let tau = tau_schedule(self.semi_steps_taken.min(horizon), horizon, cfg.tau0_ema);
            ema_update(self.teacher.as_mut().unwrap(), &self.student, tau);
            self.semi_steps_taken += 1;
            tau
        } else {
            0.0
        };

        Ok(StepMetrics {
            step,
            epoch,
            mode: mode.map_or("sup", Mode::key),
            lr,
            tau,
            loss_total,
            loss_lab: lab_means,
            loss_unlab_ctc: unlab_ctc,
            loss_unlab_att: unlab_att,
            accept_rate_ctc: ctc_accepts as f64 / accepted.max(1) as f64,
            accept_rate_att: att_accepts as f64 / att_tokens.max(1) as f64,
            skip_count,
            pl_wall_ms,
        })
    }

    /// Assemble the batches for a step from shuffled labelled order.
    fn step_inputs(&mut self, lab_indices: &[usize], semi: bool) -> StepInputs<'a> {
        let labelled: Vec<(usize, &Sample)> = lab_indices
            .iter()
            .map(|&i| (i, &self.corpus.labelled[i]))
            .collect();
        let unlabelled: Vec<(usize, &Sample)> = if semi {
            self.next_unlabelled_batch()
                .into_iter()
                .map(|i| (i, &self.corpus.unlabelled[i]))
                .collect()
        } else {
            Vec::new()
        };
        StepInputs {
            labelled,
            unlabelled,
        }
    }

    /// Full training run: writes metrics.csv and checkpoints under
    /// `out_dir`, returns the artifact paths.
    pub fn run(&mut self, out_dir: &Path) -> Result<RunArtifacts, TrainError> {
        std::fs::create_dir_all(out_dir.join("checkpoints"))?;
        let metrics_path = out_dir.join("metrics.csv");
        let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
        writeln!(metrics, "{METRICS_HEADER}")?;

        let mut step = 0usize;
        for epoch in 0..self.cfg.epochs {
            if epoch == self.cfg.warm_epochs && self.teacher.is_none() {
                self.teacher = Some(self.student.clone());
            }
            let semi = self.teacher.is_some();
            let mut order: Vec<usize> = (0..self.corpus.labelled.len()).collect();
            let mut rng = SplitMix64::stream(self.cfg.seed, &[ROLE_SHUFFLE_LAB, epoch as u64]);
            rng.shuffle(&mut order);
            let batches: Vec<Vec<usize>> = order
                .chunks(self.cfg.batch_labelled)
                .map(|c| c.to_vec())
                .collect();
            for batch in batches {
                let inputs = self.step_inputs(&batch, semi);
                let m = self.train_step(step, &inputs)?;
                writeln!(metrics, "{}", m.csv_line())?;
                step += 1;
            }
            let done = epoch + 1;
            if self.cfg.ckpt_every > 0 && done % self.cfg.ckpt_every == 0 && done < self.cfg.epochs
            {
                self.save_checkpoints(out_dir, done)?;
            }
        }
        metrics.flush()?;
        let (student_path, teacher_path) = self.save_checkpoints(out_dir, self.cfg.epochs)?;
        Ok(RunArtifacts {
            metrics_path,
            student_path,
            teacher_path,
        })
    }

    fn save_checkpoints(
        &self,
        out_dir: &Path,
        epoch: usize,
    ) -> Result<(PathBuf, PathBuf), TrainError> {
        let student_path = out_dir.join(format!("checkpoints/student-epoch{epoch}.ckpt"));
        self.student.save(&student_path)?;
        let teacher_path = out_dir.join(format!("checkpoints/teacher-epoch{epoch}.ckpt"));
        match &self.teacher {
            Some(t) => t.save(&teacher_path)?,
            // a purely supervised run has no EMA teacher; save the student
            None => self.student.save(&teacher_path)?,
        }
        Ok((student_path, teacher_path))
    }
}

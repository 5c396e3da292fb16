//! The teacher–student training loop.
//!
//! Each step draws one labeled and one unlabeled case. The labeled branch
//! fuses the registration label with the teacher's prediction and trains
//! the student on a weak view of the pair. The unlabeled branch builds two
//! weak views that share their flips and differ in noise, labels them with
//! the teacher, selects trusted voxels by MC-dropout uncertainty on view 1,
//! and trains the student on a CutMix of the two views. The contrastive
//! term ties the student's projection features of the two weak views
//! together and pushes away strong-view features of other classes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::autodiff::Tape;
use crate::config::TrainConfig;
use crate::contrastive::{bidirectional_loss_on_tape, mine_indices, MiningInputs};
use crate::error::{Error, Result};
use crate::grid::{argmax_labels, downsample_labels, downsample_mask, downsample_mean, BoolMask, LabelMap};
use crate::losses::{segmentation_loss_on_tape, LossReport};
use crate::metrics::{summarize, MetricsRecord, MetricsSummary};
use crate::net::{
    decoder_activations, ema_update, forward_on_tape, predict, seg_head, write_checkpoint, Heads, ModelParams, Sgd,
};
use crate::perturb::{weak_perturb_with, CutBox, Flips};
use crate::rng::{derive_seed, rng_from};
use crate::synth::{fuse_labels, Dataset};
use crate::uncertainty::{
    advance_age, confident_ratio, mc_uncertainty_from_decoder, select_mask, Branch, ConfidentRatio, ScheduleState,
};

const POOL: (usize, usize, usize) = (2, 2, 2);

/// Every random draw of one step, derived from the run seed and `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepSeeds {
    pub labeled_index: usize,
    pub unlabeled_index: usize,
    pub labeled_flips: u64,
    pub labeled_noise: u64,
    pub unlabeled_flips: u64,
    pub noise_w1: u64,
    pub noise_w2: u64,
    pub mc: u64,
    pub cut: u64,
    pub dropout_labeled: u64,
    pub dropout_strong: u64,
}

impl StepSeeds {
    pub fn derive(seed: u64, t: usize, n_labeled: usize, n_unlabeled: usize) -> StepSeeds {
        let s = |k: u64| derive_seed(seed, &[0x7374_6570, t as u64, k]);
        let mut pick = rng_from(s(0));
        StepSeeds {
            labeled_index: pick.random_range(0..n_labeled),
            unlabeled_index: pick.random_range(0..n_unlabeled),
            labeled_flips: s(1),
            labeled_noise: s(2),
            unlabeled_flips: s(3),
            noise_w1: s(4),
            noise_w2: s(5),
            mc: s(6),
            cut: s(7),
            dropout_labeled: s(8),
            dropout_strong: s(9),
        }
    }
}

/// Mutable state of one training run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a Dataset,
    student: ModelParams,
    teacher: ModelParams,
    sgd: Sgd,
    schedule: ScheduleState,
    seed: u64,
}

/// Seed of the initial student weights for a run seed.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, &[0x696e_6974])
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &TrainConfig, data: &'a Dataset, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if data.labeled.is_empty() || data.unlabeled.is_empty() {
            return Err(Error::Argument("training needs labeled and unlabeled cases".into()));
        }
        let arch = cfg.architecture();
        let student = ModelParams::init(arch, init_seed(seed))?;
        let teacher = student.clone();
        let sgd = Sgd::new(&student, cfg.momentum)?;
        let mut schedule = ScheduleState::new(cfg.iterations.max(1), cfg.alpha, cfg.delta, cfg.tau_sched)?;
        schedule.warm_cap = cfg.warm_cap;
        Ok(Trainer {
            cfg: cfg.clone(),
            data,
            student,
            teacher,
            sgd,
            schedule,
            seed,
        })
    }

    pub fn student(&self) -> &ModelParams {
        &self.student
    }

    pub fn teacher(&self) -> &ModelParams {
        &self.teacher
    }

    pub fn schedule(&self) -> &ScheduleState {
        &self.schedule
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn dump(&self, what: &str) -> String {
        let s = &self.schedule;
        let mut out = format!("{what} at step {}\nschedule state:\n", s.t);
        let _ = writeln!(out, "  t = {}\n  t_max = {}", s.t, s.t_max);
        let _ = writeln!(out, "  alpha = {}\n  delta = {}\n  lambda = {}", s.alpha, s.delta, s.lambda);
        let _ = writeln!(out, "  tau_sched = {}\n  warm_cap = {}", s.tau_sched, s.warm_cap);
        let _ = writeln!(out, "  last_lu = {:?}\n  v = {:?}\n  xi = {}", s.last_lu, s.v, s.xi());
        let _ = write!(out, "  lr = {}", self.cfg.lr_at(s.t));
        out
    }

    fn selection(&self, u: Option<&crate::uncertainty::UncertaintyMap>, n: usize) -> Result<(ConfidentRatio, BoolMask)> {
        let dims = self.data.dims;
        let Some(u) = u else {
            let ratio = ConfidentRatio {
                r_conf: 1.0,
                v: None,
                branch: Branch::Off,
            };
            return Ok((ratio, BoolMask::filled(dims, true)));
        };
        // before any L_u exists the schedule stays on the warm branch
        let lu = self.schedule.last_lu.unwrap_or(f64::INFINITY);
        let ratio = confident_ratio(&self.schedule, lu)?;
        let mask = select_mask(u, ratio.r_conf)?;
        debug_assert_eq!(mask.dims().len(), n);
        Ok((ratio, mask))
    }

    /// Teacher forwards only fail on non-finite outputs once shapes are
    /// validated, which means the run has diverged.
    fn diverged(&self, e: Error) -> Error {
        match e {
            Error::Argument(m) => Error::Training(self.dump(&format!("teacher prediction failed: {m}"))),
            other => other,
        }
    }

    /// One iteration. On a non-finite loss the error carries a dump of the
    /// schedule state and no parameter is touched.
    pub fn step(&mut self) -> Result<LossReport> {
        let t = self.schedule.t;
        let cfg = &self.cfg;
        let data = self.data;
        let dims = data.dims;
        let seeds = StepSeeds::derive(self.seed, t, data.labeled.len(), data.unlabeled.len());
        let lr = cfg.lr_at(t);

        // labeled branch: fused target on a weak view
        let lab = &data.labeled[seeds.labeled_index];
        let seg = argmax_labels(&predict(&self.teacher, &lab.image).map_err(|e| self.diverged(e))?);
        let fused = fuse_labels(&lab.registration, &seg, lab.k, cfg.fusion_w0, cfg.half_life(dims.d))?.fused;
        let lflips = Flips::sample(seeds.labeled_flips);
        let x_l = weak_perturb_with(&lab.image, lflips, cfg.weak_noise, seeds.labeled_noise)?.image;
        let y_l = lflips.apply_labels(&fused);

        // unlabeled branch: two weak views sharing flips
        let img = &data.unlabeled[seeds.unlabeled_index].image;
        let uflips = Flips::sample(seeds.unlabeled_flips);
        let w1 = weak_perturb_with(img, uflips, cfg.weak_noise, seeds.noise_w1)?.image;
        let w2 = weak_perturb_with(img, uflips, cfg.weak_noise, seeds.noise_w2)?.image;
        let dec1 = decoder_activations(&self.teacher, &w1)?;
        let p1 = seg_head(&self.teacher, &dec1, None).map_err(|e| self.diverged(e))?;
        let p2 = predict(&self.teacher, &w2).map_err(|e| self.diverged(e))?;
        let (y1, y2) = (argmax_labels(&p1), argmax_labels(&p2));
        let u = if cfg.enable_su {
            Some(
                mc_uncertainty_from_decoder(&self.teacher, &dec1, cfg.mc_passes, seeds.mc)
                    .map_err(|e| self.diverged(e))?
                    .1,
            )
        } else {
            None
        };
        let (ratio, mask) = self.selection(u.as_ref(), dims.len())?;

        let cut = CutBox::sample(dims, seeds.cut);
        let x_s = cut.paste_volume(&w1, &w2)?;
        let y_s = cut.paste_labels(&y1, &y2)?;

        let mut tape = Tape::new();
        let vars = self.student.register(&mut tape);
        let arch = self.student.arch();
        let heads_s = if cfg.enable_sc { Heads::Both } else { Heads::Segmentation };
        let out_l = forward_on_tape(&mut tape, arch, &vars, &x_l, Some(seeds.dropout_labeled), Heads::Segmentation)?;
        let l_s = segmentation_loss_on_tape(&mut tape, out_l.probs.expect("segmentation head"), &y_l, None)?;
        let out_s = forward_on_tape(&mut tape, arch, &vars, &x_s, Some(seeds.dropout_strong), heads_s)?;
        let l_u = segmentation_loss_on_tape(&mut tape, out_s.probs.expect("segmentation head"), &y_s, Some(&mask))?;
        let weighted = |tape: &mut Tape, v, w: f64| if w == 1.0 { v } else { tape.scale(v, w) };
        let ws = weighted(&mut tape, l_s, cfg.weight_s);
        let wu = weighted(&mut tape, l_u, cfg.weight_u);
        let mut total = tape.add(ws, wu)?;
        let mut l_bf = None;
        if cfg.enable_sc {
            let f1 = forward_on_tape(&mut tape, arch, &vars, &w1, None, Heads::Features)?.features;
            let f2 = forward_on_tape(&mut tape, arch, &vars, &w2, None, Heads::Features)?.features;
            let conf = cut.paste_volume(&p1.max_prob(), &p2.max_prob())?;
            let mined = mine_indices(&MiningInputs {
                preds_w1: &downsample_labels(&y1, POOL)?,
                preds_w2: &downsample_labels(&y2, POOL)?,
                preds_sn: &downsample_labels(&y_s, POOL)?,
                mask: &downsample_mask(&mask, POOL)?,
                conf_sn: &downsample_mean(&conf, POOL)?,
                k_neg: cfg.k_neg,
            })?;
            let v = bidirectional_loss_on_tape(
                &mut tape,
                f1.expect("projection head"),
                f2.expect("projection head"),
                out_s.features.expect("projection head"),
                mined,
                cfg.tau_contrast,
            )?;
            let wbf = weighted(&mut tape, v, cfg.weight_bf);
            total = tape.add(total, wbf)?;
            l_bf = Some(v);
        }

        let scalar = |v| tape.value(v).item().expect("scalar loss");
        let (ls, lu) = (scalar(l_s), scalar(l_u));
        let lbf = l_bf.map_or(0.0, scalar);
        let report = LossReport {
            t,
            l_s: ls,
            l_u: lu,
            l_bf: lbf,
            l_total: LossReport::total_of(cfg.weight_s * ls, cfg.weight_u * lu, cfg.weight_bf * lbf),
            mask_count: mask.count(),
            r_conf: ratio.r_conf,
            v: ratio.v,
            lambda: self.schedule.lambda,
            branch: ratio.branch,
            lr,
        };
        if !report.l_total.is_finite() {
            return Err(Error::Training(self.dump(&format!(
                "non-finite loss (L_s = {ls}, L_u = {lu}, L_bf = {lbf})"
            ))));
        }

        let grads = tape.backward(total)?;
        let bufs: Vec<Vec<f64>> = vars
            .vars()
            .iter()
            .zip(self.student.tensors())
            .map(|(&v, p)| grads.get_or_zeros(v, p.len()))
            .collect();
        if let Err(e) = self.sgd.step(&mut self.student, &bufs, lr) {
            return Err(match e {
                Error::Training(m) => Error::Training(self.dump(&m)),
                other => other,
            });
        }
        ema_update(&mut self.teacher, &self.student, cfg.ema_decay)?;

        self.schedule.last_lu = Some(lu);
        self.schedule.v = ratio.v;
        self.schedule = advance_age(&self.schedule);
        Ok(report)
    }
}

/// Teacher evaluation on the held-out cases against their ground truth.
pub fn evaluate(params: &ModelParams, data: &Dataset) -> Result<Vec<MetricsRecord>> {
    data.eval
        .iter()
        .map(|c| {
            let truth = data
                .truth(&c.id)
                .ok_or_else(|| Error::Argument(format!("no ground truth for eval case {}", c.id)))?;
            let pred: LabelMap = argmax_labels(&predict(params, &c.image)?);
            MetricsRecord::evaluate(c.id.clone(), &pred, truth)
        })
        .collect()
}

pub const METRICS_CSV_HEADER: &str = "t,case,dsc,jaccard,asd,hd";

/// Everything a run produced.
pub struct TrainOutcome {
    pub reports: Vec<LossReport>,
    /// `(t, record)` for every evaluation.
    pub metrics: Vec<(usize, MetricsRecord)>,
    pub final_summary: Option<MetricsSummary>,
    pub best: Option<(usize, MetricsSummary)>,
    pub teacher: ModelParams,
    pub student: ModelParams,
}

/// Files written by [`run_training`] into its output directory.
pub struct RunFiles;

impl RunFiles {
    pub const INITIAL: &'static str = "checkpoint_initial.ckpt";
    pub const FINAL: &'static str = "checkpoint_final.ckpt";
    pub const BEST: &'static str = "checkpoint_best.ckpt";
    pub const TRAIN_LOG: &'static str = "train_log.csv";
    pub const METRICS: &'static str = "metrics.csv";
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Runs `cfg.iterations` steps with seed `seed`, evaluating the teacher on
/// the held-out cases every `eval_period` steps and after the last one.
/// With an output directory, checkpoints (teacher weights) and both CSV
/// logs are written there.
pub fn run_training(cfg: &TrainConfig, data: &Dataset, seed: u64, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, data, seed)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_checkpoint(&dir.join(RunFiles::INITIAL), trainer.teacher())?;
    }
    let mut reports = Vec::with_capacity(cfg.iterations);
    let mut metrics = Vec::new();
    let mut best: Option<(usize, MetricsSummary)> = None;
    let mut final_summary = None;
    let mut log = format!("{}\n", LossReport::CSV_HEADER);
    let mut mcsv = format!("{METRICS_CSV_HEADER}\n");

    for t in 1..=cfg.iterations {
        let report = trainer.step();
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = out_dir {
                    write_text(dir.join(RunFiles::TRAIN_LOG), &log)?;
                }
                return Err(e);
            }
        };
        let _ = writeln!(log, "{}", report.csv_row());
        reports.push(report);
        if t % cfg.eval_period == 0 || t == cfg.iterations {
            let records = evaluate(trainer.teacher(), data)?;
            let summary = summarize(&records);
            for r in records {
                let _ = writeln!(mcsv, "{t},{}", r.csv_row());
                metrics.push((t, r));
            }
            if best.is_none_or(|(_, b)| summary.dsc > b.dsc) {
                best = Some((t, summary));
                if let Some(dir) = out_dir {
                    write_checkpoint(&dir.join(RunFiles::BEST), trainer.teacher())?;
                }
            }
            if t == cfg.iterations {
                final_summary = Some(summary);
            }
        }
    }
    if let Some(dir) = out_dir {
        if cfg.iterations > 0 {
            write_checkpoint(&dir.join(RunFiles::FINAL), trainer.teacher())?;
        }
        write_text(dir.join(RunFiles::TRAIN_LOG), &log)?;
        write_text(dir.join(RunFiles::METRICS), &mcsv)?;
    }
    Ok(TrainOutcome {
        reports,
        metrics,
        final_summary,
        best,
        teacher: trainer.teacher.clone(),
        student: trainer.student.clone(),
    })
}

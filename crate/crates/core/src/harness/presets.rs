//! One function per preset, each running a single experiment seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use archleak_grad::Tensor;

use super::config::{DefenseAttack, ExperimentConfig, Preset};
use super::report::save_png;
use super::store::slug;
use crate::aia::{extract_pairs, train_attribute_attacker, write_pairs_csv};
use crate::arch::{build, Activation, ArchSpec, ModuleTag, NormKind, Selection, StemSpec, TaggedModel};
use crate::defense::{apply_component_defense, ComponentToggle, DpConfig};
use crate::error::{Error, Result};
use crate::eval::{roc, tpr_at_fpr, RocCurve};
use crate::gia::{capture_gradients, invert, select_gradients};
use crate::mia::{collect_features, lira_auc, lira_build, lira_mask, lira_score_all, lira_statistic, train_attack_mlp, LiraScore};
use crate::train::{accuracy_on, make_split, synthetic, train_with, AttributeMode, Dataset, SyntheticConfig, TrainOptions};

/// Measurements for one variant of one seed, before they become a record.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub variant: String,
    pub spec_hash: Option<String>,
    pub recipe_hash: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    pub artifacts: Vec<PathBuf>,
    pub wall_time_s: f64,
}

/// Seed of an independent random stream `k` within experiment seed `seed`.
pub fn stream(seed: u64, k: u64) -> u64 {
    seed * 10_000 + k
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Run every variant of `cfg.preset` for one seed, handing each finished
/// variant to `emit`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, run_dir: &Path, emit: &dyn Fn(Outcome)) -> Result<()> {
    let ctx = Ctx { cfg, seed, run_dir };
    match cfg.preset {
        Preset::GiaLadder => {
            for step in cfg.ladder_steps() {
                emit(ctx.gia(&cfg.inversion_spec(step)?, Selection::All, step.to_string())?);
            }
        }
        Preset::GiaSegmentViT => {
            let spec = cfg.vit_spec();
            for sel in cfg.selections()? {
                emit(ctx.gia(&spec, sel.clone(), sel.label())?);
            }
        }
        Preset::ActivationAblation => {
            let base = cfg.inversion_spec(cfg.base_step())?;
            for act in [Activation::ReLU, Activation::GELU] {
                for bits in 0..8u8 {
                    let mask = [bits & 4 != 0, bits & 2 != 0, bits & 1 != 0];
                    let spec = ArchSpec { activation: act, activation_mask: mask, ..base.clone() };
                    let name = format!("{act:?}-{}", mask.map(|m| if m { '1' } else { '0' }).iter().collect::<String>());
                    emit(ctx.gia(&spec, Selection::All, name)?);
                }
            }
        }
        Preset::PatchifyLnAblation => {
            let base = cfg.inversion_spec(cfg.base_step())?;
            for (stem_name, stem) in [("patchify", base.stem), ("resnet-stem", StemSpec { kernel: 7, stride: 2, maxpool: true })] {
                for (norm_name, norm) in [("LN", NormKind::LayerNorm), ("BN", NormKind::BatchNorm)] {
                    let spec = ArchSpec { stem, norm, conv_bias: norm == NormKind::LayerNorm, ..base.clone() };
                    emit(ctx.gia(&spec, Selection::All, format!("{stem_name}+{norm_name}"))?);
                }
            }
        }
        Preset::DefenseComponents => {
            let base = match cfg.defense.attack {
                DefenseAttack::Gia => cfg.inversion_spec(cfg.base_step())?,
                DefenseAttack::MiaNetwork => cfg.victim_spec()?,
            };
            for set in cfg.toggle_sets() {
                let spec = apply_component_defense(&base, &set.iter().copied().collect())?;
                let name = toggle_label(&set);
                match cfg.defense.attack {
                    DefenseAttack::Gia => emit(ctx.gia(&spec, Selection::All, name)?),
                    DefenseAttack::MiaNetwork => emit(ctx.network(&spec, &name)?.0),
                }
            }
        }
        Preset::MiaNetwork => {
            let (victim, null) = ctx.network(&cfg.victim_spec()?, "victim")?;
            emit(victim);
            emit(null);
        }
        Preset::MiaLira => {
            for o in ctx.lira(None, "victim", true)? {
                emit(o);
            }
        }
        Preset::DefenseDpsgd | Preset::DefenseDpsgdStem => {
            let target = if cfg.preset == Preset::DefenseDpsgdStem { Selection::only(ModuleTag::Stem) } else { Selection::All };
            for &sigma in &cfg.defense.sigmas {
                let dp = DpConfig { clip_norm: cfg.defense.clip_norm, noise_multiplier: sigma, target_tags: target.clone(), seed: 0 };
                emit(ctx.lira(Some(dp), &format!("sigma={sigma}"), false)?.remove(0));
            }
        }
        Preset::Aia => emit(ctx.aia()?),
    }
    Ok(())
}

fn toggle_label(set: &[ComponentToggle]) -> String {
    if set.is_empty() {
        return "none".into();
    }
    set.iter().map(|t| format!("{t:?}")).collect::<Vec<_>>().join("+")
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    run_dir: &'a Path,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl Ctx<'_> {
    fn artifact_dir(&self, variant: &str) -> Result<PathBuf> {
        let d = self.run_dir.join(slug(variant));
        io(&d, fs::create_dir_all(&d))?;
        Ok(d)
    }

    fn synthetic(&self, n: usize, attribute: AttributeMode, attribute_classes: usize) -> Result<Dataset> {
        let c = SyntheticConfig {
            noise: self.cfg.data_noise(),
            signal: self.cfg.data.signal,
            attribute,
            attribute_classes,
            ..SyntheticConfig::new(n, self.cfg.data.classes, self.cfg.input_shape(), self.cfg.data_seed(self.seed))
        };
        synthetic(&c)
    }

    /// One example per class; the seed picks which one is attacked.
    fn target(&self) -> Result<(Tensor, Vec<usize>)> {
        let d = self.synthetic(self.cfg.data.classes, AttributeMode::None, 2)?;
        let i = self.seed as usize % d.len();
        Ok((d.batch(&[i]), vec![d.labels[i]]))
    }

    fn gia(&self, spec: &ArchSpec, selection: Selection, variant: String) -> Result<Outcome> {
        let t = Instant::now();
        let model = build(spec, self.seed)?;
        let (x, labels) = self.target()?;
        let gcfg = self.cfg.gia_config(self.seed, selection.clone());
        let bundle = select_gradients(&capture_gradients(&model, &x, &labels, gcfg.capture_mode)?, &selection)?;
        let r = invert(&model, &bundle, &labels, &gcfg, None, Some(&x))?;
        let m = r.metrics.clone().ok_or_else(|| Error::domain("inversion returned no metrics"))?;
        let dir = self.artifact_dir(&variant)?;
        let mut artifacts = vec![dir.join("truth.png"), dir.join("reconstruction.png")];
        save_png(&artifacts[0], &x)?;
        save_png(&artifacts[1], &r.reconstruction)?;
        for (it, img) in &r.snapshots {
            let p = dir.join(format!("snap-{it}.png"));
            save_png(&p, img)?;
            artifacts.push(p);
        }
        let trace = dir.join("trace.csv");
        let mut w = csv::Writer::from_path(&trace)?;
        w.write_record(["iteration", "cost", "match"])?;
        for (i, (c, mt)) in r.loss_trace.iter().zip(&r.match_trace).enumerate() {
            w.write_record([i.to_string(), c.to_string(), mt.to_string()])?;
        }
        io(&trace, w.flush())?;
        artifacts.push(trace);
        let mut metrics = BTreeMap::from([
            ("mse".to_string(), m.mse),
            ("psnr".to_string(), m.psnr),
            ("ssim".to_string(), m.ssim),
            ("final_cost".to_string(), r.final_cost as f64),
            ("observed_params".to_string(), bundle.numel() as f64),
            ("zero_target_norm".to_string(), r.flags.zero_target_norm as u8 as f64),
        ]);
        if let Some(&c) = r.loss_trace.first() {
            metrics.insert("initial_cost".into(), c as f64);
        }
        Ok(Outcome { variant, spec_hash: Some(spec.hash()), recipe_hash: None, metrics, artifacts, wall_time_s: t.elapsed().as_secs_f64() })
    }

    fn train(&self, spec: &ArchSpec, data: &Dataset, seed: u64, dp: Option<&DpConfig>) -> Result<TaggedModel> {
        let dp = dp.map(|d| DpConfig { seed, ..d.clone() });
        let opts = TrainOptions { final_eval_only: true, dp, ..Default::default() };
        Ok(train_with(build(spec, seed)?, data, &self.cfg.recipe(), seed, &opts)?.model)
    }

    fn write_roc(&self, dir: &Path, name: &str, curve: &RocCurve) -> Result<PathBuf> {
        let p = dir.join(name);
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(["fpr", "tpr"])?;
        for (f, t) in curve.fpr.iter().zip(&curve.tpr) {
            w.write_record([f.to_string(), t.to_string()])?;
        }
        io(&p, w.flush())?;
        Ok(p)
    }

    /// Shadow-model attack on a trained victim and on an untrained one.
    fn network(&self, spec: &ArchSpec, variant: &str) -> Result<(Outcome, Outcome)> {
        let t = Instant::now();
        let s = self.seed;
        let data = self.synthetic(self.cfg.network_pool(), AttributeMode::None, 2)?;
        let split = make_split(data.len(), s)?;
        let sub = |i: &[usize]| data.subset(i);
        let shadow = self.train(spec, &sub(&split.shadow_train), stream(s, 2), None)?;
        let victim = self.train(spec, &sub(&split.victim_train), stream(s, 3), None)?;
        let attack = train_attack_mlp(
            &collect_features(&shadow, &sub(&split.shadow_train))?,
            &collect_features(&shadow, &sub(&split.shadow_test))?,
            stream(s, 4),
        )?;
        let null = build(spec, stream(s, 900))?;
        let recipe_hash = Some(self.cfg.recipe().hash());
        let mut outs = Vec::new();
        for (name, model) in [(variant.to_string(), &victim), (format!("{variant}-null"), &null)] {
            let (members, others) = (sub(&split.victim_train), sub(&split.victim_test));
            let (scores, truth) = attack.scores(&collect_features(model, &members)?, &collect_features(model, &others)?)?;
            let hits = scores.iter().zip(&truth).filter(|(s, t)| (**s > 0.5) == **t).count();
            let dir = self.artifact_dir(&name)?;
            let curve = roc(&scores, &truth)?;
            let train_acc = accuracy_on(model, &members)?;
            let test_acc = accuracy_on(model, &others)?;
            let mut metrics = BTreeMap::from([
                ("attack_accuracy".to_string(), hits as f64 / truth.len() as f64),
                ("attack_auc".to_string(), curve.auc),
                ("tpr_at_fpr_0.01".to_string(), tpr_at_fpr(&curve, 0.01)),
                ("train_acc".to_string(), train_acc),
                ("test_acc".to_string(), test_acc),
                ("overfitting".to_string(), train_acc - test_acc),
            ]);
            if attack.warning.is_some() {
                metrics.insert("imbalance_warning".into(), 1.0);
            }
            outs.push(Outcome {
                variant: name,
                spec_hash: Some(spec.hash()),
                recipe_hash: recipe_hash.clone(),
                metrics,
                artifacts: vec![self.write_roc(&dir, "roc.csv", &curve)?],
                wall_time_s: t.elapsed().as_secs_f64(),
            });
        }
        let null = outs.pop().unwrap();
        Ok((outs.pop().unwrap(), null))
    }

    /// LiRA against `mia.victims` trained victims, and against an untrained
    /// model when `with_null`. With `dp`, shadows and victims share the DP
    /// recipe.
    fn lira(&self, dp: Option<DpConfig>, variant: &str, with_null: bool) -> Result<Vec<Outcome>> {
        let t = Instant::now();
        let (cfg, s) = (self.cfg, self.seed);
        let spec = cfg.victim_spec()?;
        let n = cfg.lira_pool();
        let all = self.synthetic(n + cfg.mia.test_size, AttributeMode::None, 2)?;
        let pool = all.subset(&(0..n).collect::<Vec<_>>());
        let test = all.subset(&(n..all.len()).collect::<Vec<_>>());
        let ensemble = lira_build(&pool, cfg.mia.shadows, stream(s, 1), |i, d| self.train(&spec, d, stream(s, 100 + i as u64), dp.as_ref()))?;
        let members = lira_mask(2, n, stream(s, 999))?.swap_remove(0);
        let member_idx: Vec<usize> = (0..n).filter(|&j| members[j]).collect();
        let member_set = pool.subset(&member_idx);
        let dir = self.artifact_dir(variant)?;
        let mut per_victim: Vec<BTreeMap<String, f64>> = Vec::new();
        let mut artifacts = Vec::new();
        for j in 0..cfg.mia.victims {
            let victim = self.train(&spec, &member_set, stream(s, 7 + j as u64), dp.as_ref())?;
            let scores = lira_score_all(&ensemble, &lira_statistic(&victim, &pool)?)?;
            let curve = lira_curve(&scores, &members)?;
            let train_acc = accuracy_on(&victim, &member_set)?;
            let test_acc = accuracy_on(&victim, &test)?;
            per_victim.push(BTreeMap::from([
                ("auc".to_string(), curve.auc),
                ("tpr_at_fpr_0.001".to_string(), tpr_at_fpr(&curve, 0.001)),
                ("tpr_at_fpr_0.01".to_string(), tpr_at_fpr(&curve, 0.01)),
                ("train_acc".to_string(), train_acc),
                ("test_acc".to_string(), test_acc),
                ("overfitting".to_string(), train_acc - test_acc),
                ("fallback_examples".to_string(), scores.iter().filter(|s| s.global_variance).count() as f64),
            ]));
            artifacts.push(self.write_roc(&dir, &format!("roc-v{j}.csv"), &curve)?);
            artifacts.push(write_scores(&dir.join(format!("scores-v{j}.csv")), &scores, &members)?);
        }
        let mut metrics = BTreeMap::new();
        for key in per_victim[0].keys() {
            let vals: Vec<f64> = per_victim.iter().map(|m| m[key]).collect();
            metrics.insert(key.clone(), mean(&vals));
            if vals.len() > 1 {
                for (j, v) in vals.iter().enumerate() {
                    metrics.insert(format!("{key}.v{j}"), *v);
                }
            }
        }
        if let Some(d) = &dp {
            metrics.insert("sigma".into(), d.noise_multiplier as f64);
            metrics.insert("clip_norm".into(), d.clip_norm as f64);
        }
        let recipe_hash = Some(cfg.recipe().hash());
        let victim = Outcome {
            variant: variant.to_string(),
            spec_hash: Some(spec.hash()),
            recipe_hash: recipe_hash.clone(),
            metrics,
            artifacts,
            wall_time_s: t.elapsed().as_secs_f64(),
        };
        if !with_null {
            return Ok(vec![victim]);
        }
        let null_model = build(&spec, stream(s, 500))?;
        let null_scores = lira_score_all(&ensemble, &lira_statistic(&null_model, &pool)?)?;
        let null_curve = lira_curve(&null_scores, &members)?;
        let null_dir = self.artifact_dir(&format!("{variant}-null"))?;
        let null = Outcome {
            variant: format!("{variant}-null"),
            spec_hash: Some(spec.hash()),
            recipe_hash,
            metrics: BTreeMap::from([
                ("auc".to_string(), lira_auc(&null_scores, &members)?),
                ("tpr_at_fpr_0.001".to_string(), tpr_at_fpr(&null_curve, 0.001)),
                ("tpr_at_fpr_0.01".to_string(), tpr_at_fpr(&null_curve, 0.01)),
            ]),
            artifacts: vec![self.write_roc(&null_dir, "roc.csv", &null_curve)?],
            wall_time_s: t.elapsed().as_secs_f64(),
        };
        Ok(vec![victim, null])
    }

    fn aia(&self) -> Result<Outcome> {
        let t = Instant::now();
        let (cfg, s) = (self.cfg, self.seed);
        let a = &cfg.aia;
        let spec = cfg.victim_spec()?;
        let data = self.synthetic(a.pool, a.mode(), a.attribute_classes)?;
        let split = make_split(data.len(), s)?;
        let (train, test) = (data.subset(&split.victim_train), data.subset(&split.victim_test));
        let opts = TrainOptions { test: Some(&test), final_eval_only: true, ..Default::default() };
        let recipe = cfg.recipe();
        let victim = train_with(build(&spec, s)?, &train, &recipe, s, &opts)?;
        // The attacker trains on one quarter and is scored on another, both outside the victim's data.
        let aux = extract_pairs(&victim.model, &data.subset(&split.shadow_train), a.point)?;
        let target = extract_pairs(&victim.model, &data.subset(&split.shadow_test), a.point)?;
        let attacker = train_attribute_attacker(&aux, a.attribute_classes, stream(s, 5))?;
        let ev = attacker.evaluate(&target)?;
        let variant = format!("{:?}", a.attribute);
        let dir = self.artifact_dir(&variant)?;
        let pairs = dir.join("pairs.csv");
        write_pairs_csv(io(&pairs, fs::File::create(&pairs))?, &target, &data.attribute_alphabet)?;
        let mut metrics = BTreeMap::from([
            ("attack_accuracy".to_string(), ev.accuracy),
            ("macro_f1".to_string(), ev.macro_f1),
            ("baseline".to_string(), ev.baseline),
            ("train_acc".to_string(), victim.train_acc),
        ]);
        if let Some(t) = victim.test_acc {
            metrics.insert("test_acc".into(), t);
        }
        Ok(Outcome {
            variant,
            spec_hash: Some(spec.hash()),
            recipe_hash: Some(recipe.hash()),
            metrics,
            artifacts: vec![pairs],
            wall_time_s: t.elapsed().as_secs_f64(),
        })
    }
}

fn lira_curve(scores: &[LiraScore], members: &[bool]) -> Result<RocCurve> {
    roc(&scores.iter().map(|s| s.log_lratio).collect::<Vec<_>>(), members)
}

fn write_scores(path: &Path, scores: &[LiraScore], members: &[bool]) -> Result<PathBuf> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["example", "member", "log_lratio", "mu_in", "sigma_in", "mu_out", "sigma_out"])?;
    for (s, m) in scores.iter().zip(members) {
        w.write_record([
            s.example.to_string(),
            (*m as u8).to_string(),
            s.log_lratio.to_string(),
            s.mu_in.to_string(),
            s.sigma_in.to_string(),
            s.mu_out.to_string(),
            s.sigma_out.to_string(),
        ])?;
    }
    io(path, w.flush())?;
    Ok(path.to_path_buf())
}

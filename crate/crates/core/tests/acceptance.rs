//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//!
//! `ACCEPTANCE_ONLY=4,9` restricts the run to the listed criteria.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use archleak_core::arch::{
    build, count_by_tag, documented_changes, param_layout, spec_for_step, tiny_vit, ModuleTag, Selection, VitSpec,
};
use archleak_core::defense::{dp_step, DpConfig};
use archleak_core::eval::{mse, psnr_from_mse, roc, ssim, Images};
use archleak_core::harness::{self, ExperimentConfig, RunOptions, RunSummary};
use archleak_grad::nn::Window;
use archleak_grad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_preset(root: &Path, toml: &str) -> Result<RunSummary, String> {
    let cfg = ExperimentConfig::from_toml(toml).map_err(|e| e.to_string())?;
    let s = harness::run(&cfg, &RunOptions { root: root.to_path_buf(), force: true }).map_err(|e| e.to_string())?;
    if !s.success() {
        return Err(format!("seeds failed: {:?}", s.failures));
    }
    Ok(s)
}

fn metric_of(s: &RunSummary, variant: &str, key: &str) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s.of(variant).iter().filter_map(|r| r.metric(key)).collect();
    if v.is_empty() {
        return Err(format!("no {key} for variant {variant}"));
    }
    Ok(v)
}

fn median_of(s: &RunSummary, variant: &str, key: &str) -> Result<f64, String> {
    Ok(common::median(&metric_of(s, variant, key)?))
}

fn metric_oracles() -> Verdict {
    // Every score/label assignment of length 2..=8 over a 3-value alphabet.
    let mut sets = 0usize;
    for n in 2..=8u32 {
        for code in 0..3usize.pow(n) {
            let scores: Vec<f64> = (0..n).map(|i| ((code / 3usize.pow(i)) % 3) as f64).collect();
            for mask in 1..(1u32 << n) - 1 {
                let labels: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                let auc = roc(&scores, &labels).map_err(|e| e.to_string())?.auc;
                let want = common::pairwise_auc(&scores, &labels);
                if (auc - want).abs() > 1e-12 {
                    return Err(format!("AUC {auc} vs pairwise {want} on {scores:?} {labels:?}"));
                }
                sets += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_ssim = 0.0f64;
    for _ in 0..1000 {
        let shape = [1, 3, 16, 16];
        let a: Vec<f32> = (0..768).map(|_| rng.random()).collect();
        let scale: f32 = rng.random_range(1e-4..1.0);
        let b: Vec<f32> = a.iter().map(|&v| (v + scale * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0)).collect();
        let (x, y) = (Images::new(&a, shape).unwrap(), Images::new(&b, shape).unwrap());
        let m = mse(&x, &y).map_err(|e| e.to_string())?;
        if m >= 1e-10 && (psnr_from_mse(m) - 10.0 * (1.0 / m).log10()).abs() > 1e-9 {
            return Err(format!("PSNR {} disagrees with mse {m}", psnr_from_mse(m)));
        }
        let (xx, xy, yx) = (ssim(&x, &x).unwrap(), ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        worst_ssim = worst_ssim.max((xx - 1.0).abs()).max((xy - yx).abs());
    }
    check(worst_ssim <= 1e-9, format!("{sets} AUC sets exact; 1000 PSNR pairs; SSIM deviation {worst_ssim:.1e}"))
}

fn receptive_fields() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let stacks = 20;
    for i in 0..stacks {
        let side = rng.random_range(9..40);
        let stack = common::random_stack(&mut rng, side);
        common::probe_stack(&stack, side, i)?;
    }
    common::probe_stack(&[Window::new(7, 2, 3)], 21, 0)?;
    common::probe_stack(&[Window::new(3, 2, 1), Window::new(3, 2, 1)], 21, 0)?;
    let named = |ws: &[Window]| ws.iter().enumerate().map(|(i, w)| (format!("l{i}"), *w)).collect::<Vec<_>>();
    let seven = archleak_core::arch::receptive_field_of_stack(&named(&[Window::new(3, 2, 1), Window::new(3, 2, 1)])).total;
    let eleven = archleak_core::arch::receptive_field_of_stack(&named(&[Window::new(7, 2, 3), Window::new(3, 2, 1)])).total;
    for step in 9..=12 {
        common::probe_spec(&spec_for_step(step, 10, [3, 32, 32]).unwrap().desk(16), u64::from(step))?;
    }
    check(seven == 7 && eleven == 11, format!("{stacks} random stacks and 4 ladder paths match the probe; hand cases {seven}, {eleven}"))
}

fn tag_partition() -> Verdict {
    let mut specs: Vec<_> = (1..=14).map(|k| spec_for_step(k, 10, [3, 32, 32]).unwrap()).collect();
    specs.push(tiny_vit(VitSpec { patch: 4, dim: 64, depth: 4, heads: 4, mlp_ratio: 4.0 }, 10, [3, 32, 32]));
    for spec in &specs {
        let model = build(spec, 0).map_err(|e| e.to_string())?;
        let tagged: usize = count_by_tag(&param_layout(spec).unwrap()).values().sum();
        let total: usize = model.params.iter().map(Tensor::numel).sum();
        if tagged != total {
            return Err(format!("step {:?}: tags count {tagged}, model holds {total}", spec.morph_step));
        }
    }
    for k in 2..=14 {
        let changed = specs[k as usize - 2].diff(&specs[k as usize - 1]);
        if changed.is_empty() || changed.iter().any(|f| !documented_changes(k).contains(&f.as_str())) {
            return Err(format!("step {k} changed {changed:?}, documented {:?}", documented_changes(k)));
        }
    }
    Ok("14 ladder steps and the TinyViT partition; every diff is documented".into())
}

fn gia_ladder(root: &Path) -> Verdict {
    let s = run_preset(root, "schema_version = 1\npreset = \"GiaLadder\"\nseeds = [0, 1, 2]\n[model]\nsteps = [1, 3, 4, 9, 10, 11, 12]\n")?;
    let m: BTreeMap<u8, f64> =
        [1u8, 3, 4, 9, 10, 11, 12].iter().map(|&k| median_of(&s, &k.to_string(), "mse").map(|v| (k, v))).collect::<Result<_, _>>()?;
    let detail = m.iter().map(|(k, v)| format!("{k}:{v:.4}")).collect::<Vec<_>>().join(" ");
    let ok = m[&12] <= m[&1] / 10.0 && m[&4] < m[&3] && m[&10] < m[&9] && m[&12] < m[&11];
    check(ok, format!("median MSE {detail}"))
}

fn vit_segments(root: &Path) -> Verdict {
    let s = run_preset(
        root,
        "schema_version = 1\npreset = \"GiaSegmentViT\"\nseeds = [0, 1, 2]\n[gia]\nselections = [\"Stem\", \"Attention\", \"Head\"]\n",
    )?;
    let (st, at, hd) = (median_of(&s, "Stem", "mse")?, median_of(&s, "Attention", "mse")?, median_of(&s, "Head", "mse")?);
    check(st < at && at < hd, format!("median MSE Stem {st:.4}, Attention {at:.4}, Head {hd:.4}"))
}

fn lira(root: &Path) -> Verdict {
    let s = run_preset(root, "schema_version = 1\npreset = \"MiaLira\"\nseeds = [0]\n[mia]\nshadows = 16\npool = 256\n")?;
    let auc = median_of(&s, "victim", "auc")?;
    let gap = median_of(&s, "victim", "overfitting")?;
    let null = median_of(&s, "victim-null", "auc")?;
    check(
        auc >= 0.6 && gap >= 0.3 && (null - 0.5).abs() <= 0.05,
        format!("overfit AUC {auc:.3} (gap {gap:.3}), null AUC {null:.3}"),
    )
}

fn network_mia(root: &Path) -> Verdict {
    let s = run_preset(root, "schema_version = 1\npreset = \"MiaNetwork\"\nseeds = [0, 1, 2]\n")?;
    let victim = metric_of(&s, "victim", "attack_accuracy")?;
    let null = metric_of(&s, "victim-null", "attack_accuracy")?;
    let ok = victim.iter().all(|&a| a >= 0.55) && null.iter().all(|&a| (a - 0.5).abs() <= 0.05);
    check(ok, format!("attack accuracy overfit {victim:.3?}, null {null:.3?}"))
}

fn dp_mechanics() -> Verdict {
    let tags = [ModuleTag::Stem, ModuleTag::MLP, ModuleTag::Head];
    let cfg = |c: f32, s: f32, t: Selection| DpConfig { clip_norm: c, noise_multiplier: s, target_tags: t, seed: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let huge = |rng: &mut ChaCha8Rng| -> Vec<Tensor> {
        (0..3).map(|_| Tensor::new(vec![4], (0..4).map(|_| rng.random_range(-1.0f32..1.0) * 10f32.powi(rng.random_range(-30..30))).collect())).collect()
    };
    // Clip bound on adversarial magnitudes.
    for _ in 0..200 {
        let batch: Vec<Vec<Tensor>> = (0..rng.random_range(1..6)).map(|_| huge(&mut rng)).collect();
        let out = dp_step(&batch, &tags, &cfg(0.7, 0.0, Selection::All), &mut rng).map_err(|e| e.to_string())?;
        if let Some(n) = out.clipped_norms.iter().find(|&&n| n > 0.7) {
            return Err(format!("clipped norm {n} above 0.7"));
        }
    }
    // Identity without noise or active clipping.
    let small: Vec<Vec<Tensor>> = (0..5)
        .map(|_| (0..3).map(|_| Tensor::new(vec![4], (0..4).map(|_| rng.random_range(-0.1f32..0.1)).collect())).collect())
        .collect();
    let avg = |p: usize| -> Vec<f32> {
        let mut s = vec![0.0f32; 4];
        for ex in &small {
            for (a, &v) in s.iter_mut().zip(ex[p].data()) {
                *a += v;
            }
        }
        s.into_iter().map(|v| v / small.len() as f32).collect()
    };
    let id = dp_step(&small, &tags, &cfg(100.0, 0.0, Selection::All), &mut rng).map_err(|e| e.to_string())?;
    if (0..3).any(|p| id.gradient[p].data() != avg(p).as_slice()) {
        return Err("sigma = 0 without clipping changed the average".into());
    }
    // Noise std over 10k draws.
    let (c, sigma, batch) = (0.8f32, 1.5f32, 4usize);
    let zeros: Vec<Vec<Tensor>> = (0..batch).map(|_| vec![Tensor::zeros(&[10_000])]).collect();
    let noisy = dp_step(&zeros, &[ModuleTag::Stem], &cfg(c, sigma, Selection::All), &mut rng).map_err(|e| e.to_string())?;
    let d = noisy.gradient[0].data();
    let mean = d.iter().map(|&v| f64::from(v)).sum::<f64>() / d.len() as f64;
    let std = (d.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    let want = f64::from(sigma * c) / batch as f64;
    if (std / want - 1.0).abs() > 0.05 {
        return Err(format!("noise std {std:.5}, want {want:.5}"));
    }
    // Layer-targeted mode: only the stem sees clipping and noise.
    let big: Vec<Vec<Tensor>> = (0..5).map(|_| huge(&mut rng)).collect();
    let targeted = dp_step(&big, &tags, &cfg(0.5, 2.0, Selection::only(ModuleTag::Stem)), &mut rng).map_err(|e| e.to_string())?;
    for p in 1..3 {
        let mut s = vec![0.0f32; 4];
        for ex in &big {
            for (a, &v) in s.iter_mut().zip(ex[p].data()) {
                *a += v;
            }
        }
        let plain: Vec<f32> = s.into_iter().map(|v| v / big.len() as f32).collect();
        if targeted.gradient[p].data() != plain.as_slice() {
            return Err(format!("untargeted parameter {p} changed"));
        }
    }
    Ok(format!("clip bound on 200 batches, identity bit-exact, noise std {std:.5} vs {want:.5}, pass-through bit-exact"))
}

fn nonincreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0])
}

fn defenses(root: &Path) -> Verdict {
    let s = run_preset(
        root,
        "schema_version = 1\npreset = \"DefenseComponents\"\nseeds = [0, 1, 2]\n[defense]\n\
         toggle_sets = [[], [\"RestoreActivations\", \"ResNetStem\", \"UseBatchNorm\"]]\n",
    )?;
    let base = median_of(&s, "none", "mse")?;
    let toggled = median_of(&s, "RestoreActivations+ResNetStem+UseBatchNorm", "mse")?;
    let mut detail = format!("toggles raise median MSE {base:.2e} -> {toggled:.2e} ({:.0}x)", toggled / base);
    let mut ok = toggled >= 10.0 * base;
    for preset in ["DefenseDpsgd", "DefenseDpsgdStem"] {
        let s = run_preset(root, &format!("schema_version = 1\npreset = \"{preset}\"\nseeds = [0]\n[mia]\nvictims = 3\n[defense]\nsigmas = [0.0, 0.5, 2.0]\n"))?;
        let (mut aucs, mut accs) = (Vec::new(), Vec::new());
        for sigma in ["0", "0.5", "2"] {
            aucs.push(median_of(&s, &format!("sigma={sigma}"), "auc")?);
            accs.push(median_of(&s, &format!("sigma={sigma}"), "test_acc")?);
        }
        ok &= nonincreasing(&aucs) && nonincreasing(&accs);
        detail += &format!("; {preset} AUC {aucs:.3?} test acc {accs:.3?}");
    }
    check(ok, detail)
}

fn attribute_inference(root: &Path) -> Verdict {
    let ind = run_preset(root, "schema_version = 1\npreset = \"Aia\"\nseeds = [0, 1, 2]\n[aia]\nattribute = \"Independent\"\n")?;
    let ren = run_preset(root, "schema_version = 1\npreset = \"Aia\"\nseeds = [0, 1, 2]\n[aia]\nattribute = \"Rendered\"\n")?;
    let f1 = metric_of(&ind, "Independent", "macro_f1")?;
    let base = metric_of(&ind, "Independent", "baseline")?[0];
    let acc = metric_of(&ren, "Rendered", "attack_accuracy")?;
    let ok = f1.iter().all(|&f| (f - base).abs() <= 0.1) && acc.iter().all(|&a| a >= base + 0.15);
    check(ok, format!("independent macro-F1 {f1:.3?}, rendered accuracy {acc:.3?}, baseline {base}"))
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let dir = tempfile::tempdir().expect("temporary output root");
    let root = dir.path();
    type Criterion<'a> = (usize, &'a str, u64, Box<dyn Fn() -> Verdict + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "metric oracles", 60, Box::new(metric_oracles)),
        (2, "receptive field vs gradient probe", 60, Box::new(receptive_fields)),
        (3, "tag partition and ladder locality", 60, Box::new(tag_partition)),
        (4, "GIA ladder trend", 15 * 60, Box::new(|| gia_ladder(root))),
        (5, "TinyViT segment ordering", 10 * 60, Box::new(|| vit_segments(root))),
        (6, "LiRA calibration", 20 * 60, Box::new(|| lira(root))),
        (7, "network MIA sanity", 20 * 60, Box::new(|| network_mia(root))),
        (8, "DP-SGD mechanics", 120, Box::new(dp_mechanics)),
        (9, "defense direction", 30 * 60, Box::new(|| defenses(root))),
        (10, "AIA null and signal", 10 * 60, Box::new(|| attribute_inference(root))),
    ];
    let mut failed = 0;
    for (id, name, budget, f) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let t = Instant::now();
        let verdict = f();
        let took = t.elapsed();
        let over = took > Duration::from_secs(*budget);
        let (pass, detail) = match verdict {
            Ok(d) if !over => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget}s budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!("{} {id:>2} {name} ({:.1}s): {detail}", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

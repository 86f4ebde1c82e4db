//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cgnet_core::backbone::STAGES;
use cgnet_core::cgm::{attention_map, AttentionConfig, ChangeGuideModule, DEFAULT_TOKEN_CAP};
use cgnet_core::data::{detile, make_batch, synthetic, tile_pair, ImagePair, InMemory, Normalization};
use cgnet_core::decoder::ChangePrediction;
use cgnet_core::init::{reinitialize, set_named};
use cgnet_core::loss::total_loss;
use cgnet_core::metrics::{f1_from, imbalance_ratio, iou_from_f1, DatasetStats, MetricRecord};
use cgnet_core::render::{render_error_map, ErrorMapPalette};
use cgnet_core::trainer::{evaluate, select_checkpoint, train, EpochLog};
use cgnet_core::{CgNet, ExperimentConfig, ModelConfig, Variant};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn metric_identities() -> Check {
    let f1 = f1_from(0.9315, 0.9090);
    let iou = iou_from_f1(f1);
    ensure((f1 - 0.9201).abs() <= 1e-4, format!("LEVIR F1 {f1:.6}"))?;
    ensure((iou - 0.8520).abs() <= 2e-4, format!("LEVIR IoU {iou:.6}"))?;
    let whu = iou_from_f1(0.9259);
    ensure((whu - 0.8621).abs() <= 2e-4, format!("WHU IoU {whu:.6}"))?;
    Ok(format!("LEVIR F1 {f1:.5} IoU {iou:.5}, WHU IoU {whu:.5}"))
}

fn imbalance_audit() -> Check {
    let rows = [
        ("LEVIR", 31_066_643u64, 636_876_269u64, 20.50),
        ("WHU", 21_442_501, 481_873_979, 22.47),
        ("SYSU", 286_092_024, 1_024_627_976, 3.58),
        ("S2Looking", 66_552_990, 5_176_327_010, 77.78),
    ];
    let mut out = Vec::new();
    for (name, changed, unchanged, expect) in rows {
        let r = imbalance_ratio(&DatasetStats { changed_pixels: changed, unchanged_pixels: unchanged }).map_err(err)?;
        ensure((r - expect).abs() <= 0.005, format!("{name}: {r:.4} vs {expect}"))?;
        out.push(format!("{name} 1:{r:.2}"));
    }
    Ok(out.join(", "))
}

fn tiling_arithmetic() -> Check {
    let size = 1024;
    let mut base = synthetic::coordinate_pair("base", size, size);
    // make the two dates differ so a t1/t2 swap would be caught
    for v in base.t2.iter_mut() {
        *v = v.wrapping_add(17);
    }
    let mut totals = Vec::new();
    for (split, pairs, expect) in [("train", 445usize, 7120usize), ("val", 64, 1024), ("test", 128, 2048)] {
        let mut tiles_seen = 0;
        for i in 0..pairs {
            let mut pair: ImagePair = base.clone();
            pair.id = format!("{split}_{i}");
            pair.t1[..8].copy_from_slice(&(i as u64).to_le_bytes());
            pair.label[i % (size * size)] ^= 1;
            let tiles = tile_pair(&pair, 256).map_err(err)?;
            tiles_seen += tiles.len();
            let back = detile(&tiles, 4, 4, &pair.id).map_err(err)?;
            ensure(
                back.t1 == pair.t1 && back.t2 == pair.t2 && back.label == pair.label,
                format!("{} does not reassemble bit-exactly", pair.id),
            )?;
        }
        ensure(tiles_seen == expect, format!("{split}: {tiles_seen} tiles, expected {expect}"))?;
        totals.push(format!("{split} {tiles_seen}"));
    }
    Ok(totals.join(", "))
}

fn attention_rows_normalised() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dev = Device::Cpu;
    let mut worst = 0f64;
    for _ in 0..1000 {
        let heads = rng.random_range(1..=4);
        let l = rng.random_range(1..=24);
        let d = rng.random_range(1..=8);
        let scale: f32 = rng.random_range(0.1..20.0);
        let n = heads * l * d;
        let q: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0f32) * scale).collect();
        let k: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0f32) * scale).collect();
        let q = Tensor::from_vec(q, (1, heads, l, d), &dev).map_err(err)?;
        let k = Tensor::from_vec(k, (1, heads, l, d), &dev).map_err(err)?;
        let a = attention_map(&q, &k).map_err(err)?;
        let sums = flat(&a.sum(3).map_err(err)?);
        for s in sums {
            worst = worst.max((s - 1.0).abs());
        }
        ensure(flat(&a).iter().all(|v| v.is_finite() && *v >= 0.0), "non-finite or negative attention")?;
    }
    ensure(worst <= 1e-5, format!("max row-sum deviation {worst:e}"))?;
    Ok(format!("max |row sum - 1| = {worst:.2e}"))
}

fn guide_module(channels: usize, dtype: DType, seed: u64) -> (VarMap, ChangeGuideModule) {
    let vm = VarMap::new();
    let vb = VarBuilder::from_varmap(&vm, dtype, &Device::Cpu);
    let m = ChangeGuideModule::new(channels, AttentionConfig::for_channels(channels), DEFAULT_TOKEN_CAP, vb).unwrap();
    reinitialize(&vm, seed).unwrap();
    (vm, m)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng, dtype: DType) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn zero_output_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = 0;
    for (c, h, w) in [(8, 4, 4), (16, 8, 12), (12, 40, 40)] {
        let (vm, cgm) = guide_module(c, DType::F32, 9);
        set_named(&vm, "out.weight", &Tensor::zeros((c, c, 1, 1), DType::F32, &Device::Cpu).unwrap()).map_err(err)?;
        set_named(&vm, "out.bias", &Tensor::zeros(c, DType::F32, &Device::Cpu).unwrap()).map_err(err)?;
        let f = randn(&[2, c, h, w], &mut rng, DType::F32);
        let g = (randn(&[2, 1, h, w], &mut rng, DType::F32) * 4.0).unwrap();
        for train in [false, true] {
            let out = cgm.forward(&f, &g, train).map_err(err)?;
            let (a, b): (Vec<f32>, Vec<f32>) =
                (out.flatten_all().unwrap().to_vec1().unwrap(), f.flatten_all().unwrap().to_vec1().unwrap());
            ensure(a == b, format!("C={c} {h}x{w} train={train}: output differs from input"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} cases bit-exact, including the chunked path"))
}

fn cgm_gradient_check() -> Check {
    let c = 4;
    let (vm, cgm) = guide_module(c, DType::F64, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // biases start at zero; move them so their gradients are generic
    for name in ["guide.bias", "out.bias"] {
        set_named(&vm, name, &(randn(&[c], &mut rng, DType::F64) * 0.5).unwrap()).map_err(err)?;
    }
    let features = Var::from_tensor(&randn(&[1, c, 4, 4], &mut rng, DType::F64)).map_err(err)?;
    let guide = Var::from_tensor(&(randn(&[1, 1, 4, 4], &mut rng, DType::F64) * 2.0).unwrap()).map_err(err)?;
    let probe = randn(&[1, c, 4, 4], &mut rng, DType::F64);
    let objective = || -> f64 {
        let out = cgm.forward(features.as_tensor(), guide.as_tensor(), true).unwrap();
        out.mul(&probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
    };
    let out = cgm.forward(features.as_tensor(), guide.as_tensor(), true).map_err(err)?;
    let grads = out.mul(&probe).unwrap().sum_all().unwrap().backward().map_err(err)?;

    let mut vars: Vec<(String, Var)> = vm.data().lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars.push(("input.features".into(), features.clone()));
    vars.push(("input.guide".into(), guide.clone()));
    ensure(vars.len() == 9, format!("expected 7 parameters + 2 inputs, saw {}", vars.len()))?;

    let h = 1e-5;
    let mut worst = (0f64, String::new());
    let mut checked = 0;
    for (name, var) in &vars {
        let analytic = flat(grads.get(var).ok_or_else(|| format!("no gradient for {name}"))?);
        let shape = var.dims().to_vec();
        let base = flat(var.as_tensor());
        for i in 0..base.len() {
            let probe_at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                objective()
            };
            let numeric = (probe_at(h) - probe_at(-h)) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}] analytic {a:e} numeric {numeric:e}"));
            }
            checked += 1;
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
    }
    ensure(worst.0 <= 1e-4, format!("relative error {:.2e} at {}", worst.0, worst.1))?;
    Ok(format!("{checked} entries, max relative error {:.2e}", worst.0))
}

fn shape_contract() -> Check {
    let pairs = synthetic::synthetic_pairs(2, 256, 5);
    let batch = make_batch(&pairs, &Normalization::default(), DType::F32).map_err(err)?;
    for v in Variant::ALL {
        let model = CgNet::new(ModelConfig::tiny(v.toggles()), 1, DType::F32).map_err(err)?;
        let pred = model.forward(&batch.t1, &batch.t2, false).map_err(err)?;
        ensure(pred.logits.dims() == [2, 2, 256, 256], format!("{v}: logits {:?}", pred.logits.dims()))?;
        ensure(pred.aux_logits.dims() == [2, 1, 256, 256], format!("{v}: aux {:?}", pred.aux_logits.dims()))?;
        ensure(flat(&pred.logits).iter().all(|x| x.is_finite()), format!("{v}: non-finite logits"))?;
    }
    let full = CgNet::new(ModelConfig::default(), 1, DType::F32).map_err(err)?;
    let small = make_batch(&synthetic::synthetic_pairs(1, 32, 5), &Normalization::default(), DType::F32).map_err(err)?;
    let pyramid = full.encode(&small.t1, false).map_err(err)?;
    for (i, s) in STAGES.iter().enumerate() {
        let dims = pyramid.stages[i].dims().to_vec();
        let expect = [1, s.out_channels, 32 / s.stride_vs_input, 32 / s.stride_vs_input];
        ensure(dims == expect, format!("stage {}: {dims:?} vs {expect:?}", i + 1))?;
    }
    let chans: Vec<_> = STAGES.iter().map(|s| s.out_channels).collect();
    let strides: Vec<_> = STAGES.iter().map(|s| s.stride_vs_input).collect();
    ensure(chans == [64, 128, 256, 512, 512] && strides == [1, 2, 4, 8, 16], "stage table")?;
    Ok("8 variants at [2,3,256,256]; encoder channels (64,128,256,512,512) at strides (1,2,4,8,16)".into())
}

fn overfit_config(variant: Variant) -> ExperimentConfig {
    ExperimentConfig {
        channel_scale: ModelConfig::TINY_SCALE,
        batch_size: 8,
        max_epochs: 200,
        max_steps: Some(200),
        augment: false,
        stop_at_f1: Some(0.95),
        seed: 0,
        ..Default::default()
    }
    .with_variant(variant)
}

fn overfit_smoke() -> Check {
    let data = InMemory(synthetic::synthetic_pairs(8, 64, 3));
    let mut lines = Vec::new();
    for variant in [Variant::CgNet, Variant::Base] {
        let cfg = overfit_config(variant);
        let model = CgNet::new(cfg.model_config(), cfg.seed, DType::F32).map_err(err)?;
        let out = train(&cfg, &model, &data, &data, |_| {}).map_err(err)?;
        let last = out.history.last().ok_or("no epochs")?;
        let (_, m) = evaluate(&model, &data, 8).map_err(err)?;
        let line = format!(
            "{variant}: F1 {:.4} after {} steps, loss {:.4} -> {:.4}",
            m.f1, out.steps, out.initial_loss, last.total_loss
        );
        ensure(m.f1 > 0.95 && out.steps <= 200, line.clone())?;
        ensure(last.total_loss < out.initial_loss, line.clone())?;
        lines.push(line);
    }
    Ok(lines.join("; "))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn deep_supervision() -> Check {
    let pairs = synthetic::synthetic_pairs(2, 32, 7);
    let batch = make_batch(&pairs, &Normalization::default(), DType::F64).map_err(err)?;
    let model = CgNet::new(ModelConfig::tiny(Variant::CgNet.toggles()), 2, DType::F64).map_err(err)?;
    let pred: ChangePrediction = model.forward(&batch.t1, &batch.t2, false).map_err(err)?;
    let r = total_loss(&pred, &batch.label, 1.0).map_err(err)?;
    let tensor_total = r.total.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    ensure((r.report.total - (r.report.main + r.report.aux)).abs() <= 1e-10, "report total != main + aux")?;
    ensure((tensor_total - (r.report.main + r.report.aux)).abs() <= 1e-10, "loss tensor != main + aux")?;

    // independent scalar recomputation from the raw logits
    let logits = flat(&pred.logits);
    let aux = flat(&pred.aux_logits);
    let labels: Vec<f64> = batch.masks.concat().iter().map(|&v| v as f64).collect();
    let hw = 32 * 32;
    let (mut main_o, mut aux_o) = (0.0, 0.0);
    for (i, y) in labels.iter().enumerate() {
        let (b, p) = (i / hw, i % hw);
        let l0 = logits[b * 2 * hw + p];
        let l1 = logits[b * 2 * hw + hw + p];
        main_o += bce(sigmoid(l1 - l0), *y);
        aux_o += bce(sigmoid(aux[i]), *y);
    }
    let n = labels.len() as f64;
    let (main_o, aux_o) = (main_o / n, aux_o / n);
    ensure((r.report.main - main_o).abs() <= 1e-10, format!("main {} vs oracle {main_o}", r.report.main))?;
    ensure((r.report.aux - aux_o).abs() <= 1e-10, format!("aux {} vs oracle {aux_o}", r.report.aux))?;

    let cfg = ExperimentConfig {
        channel_scale: ModelConfig::TINY_SCALE,
        batch_size: 2,
        max_epochs: 2,
        aux_weight: 0.0,
        augment: false,
        ..Default::default()
    };
    let data = InMemory(synthetic::synthetic_pairs(4, 32, 8));
    let m = CgNet::new(cfg.model_config(), 0, DType::F32).map_err(err)?;
    let out = train(&cfg, &m, &data, &data, |_| {}).map_err(err)?;
    ensure(out.history.iter().all(|l| l.total_loss == l.main_loss), "aux_weight 0: total != main")?;
    Ok(format!(
        "total = main + aux within 1e-10 (main {:.6}, aux {:.6}); aux_weight 0 trains with total == main",
        r.report.main, r.report.aux
    ))
}

fn selection_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..100 {
        let n = rng.random_range(1..=30);
        // coarse values so ties on F1 and IoU are common
        let history: Vec<(usize, f64, f64)> = (0..n)
            .map(|i| (i + 1, rng.random_range(0..6) as f64 / 10.0, rng.random_range(0..4) as f64 / 10.0))
            .collect();
        let mut shuffled = history.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let mut expect = history[0];
        for &h in &history {
            let key = |x: (usize, f64, f64)| (x.1, x.2, std::cmp::Reverse(x.0));
            if key(h).partial_cmp(&key(expect)) == Some(std::cmp::Ordering::Greater) {
                expect = h;
            }
        }
        let got = select_checkpoint(&shuffled).map_err(err)?;
        ensure(got == expect.0, format!("case {case}: picked {got}, oracle {}", expect.0))?;
    }
    ensure(select_checkpoint(&[]).is_err(), "empty history accepted")?;
    Ok("100 randomized histories agree with the brute-force oracle".into())
}

fn error_map_palette() -> Check {
    let pal = ErrorMapPalette::default();
    // pixels: TP, FP, FN, TN
    let img = render_error_map(&[1, 1, 0, 0], &[1, 0, 1, 0], 2, 2, &pal).map_err(err)?;
    let px: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
    ensure(px == [[255, 255, 255], [255, 0, 0], [0, 0, 255], [0, 0, 0]], format!("got {px:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (37, 53);
    let pred: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..2)).collect();
    let gt: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..2)).collect();
    let img = render_error_map(&pred, &gt, h, w, &pal).map_err(err)?;
    for (i, p) in img.pixels().enumerate() {
        let expect = match (pred[i], gt[i]) {
            (1, 1) => pal.tp,
            (1, 0) => pal.fp,
            (0, 1) => pal.fn_,
            _ => pal.tn,
        };
        ensure(p.0 == expect, format!("pixel {i}: {:?}", p.0))?;
    }
    ensure(render_error_map(&[1, 0], &[1], 1, 2, &pal).is_err(), "shape mismatch accepted")?;
    Ok("TP white, FP red, FN blue, TN black; no other colours".into())
}

fn determinism() -> Check {
    let data = InMemory(synthetic::synthetic_pairs(4, 32, 12));
    let cfg = ExperimentConfig {
        channel_scale: ModelConfig::TINY_SCALE,
        batch_size: 2,
        max_epochs: 3,
        seed: 17,
        ..Default::default()
    };
    let run = || -> Result<(Vec<EpochLog>, String), String> {
        let model = CgNet::new(cfg.model_config(), cfg.seed, DType::F32).map_err(err)?;
        let out = train(&cfg, &model, &data, &data, |_| {}).map_err(err)?;
        let (counts, _) = evaluate(&model, &data, 2).map_err(err)?;
        Ok((out.history, serde_json::to_string(&MetricRecord::new(&counts)).map_err(err)?))
    };
    let (a, ja) = run()?;
    let (b, jb) = run()?;
    ensure(a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.same_values(y)), "epoch logs differ")?;
    ensure(ja == jb, format!("metric JSON differs: {ja} vs {jb}"))?;
    Ok(format!("{} epochs identical; {ja}", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 12] = [
        ("1 metric identities", metric_identities),
        ("2 imbalance audit", imbalance_audit),
        ("3 tiling arithmetic", tiling_arithmetic),
        ("4a attention rows sum to one", attention_rows_normalised),
        ("4b zero output conv is identity", zero_output_identity),
        ("4c guide module gradient check", cgm_gradient_check),
        ("5 end-to-end shapes", shape_contract),
        ("6 overfit smoke", overfit_smoke),
        ("7 deep supervision", deep_supervision),
        ("8 checkpoint selection", selection_oracle),
        ("9 error map palette", error_map_palette),
        ("10 determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  criterion {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

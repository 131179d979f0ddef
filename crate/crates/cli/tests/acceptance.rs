//! One line per acceptance criterion. Criteria 1–8 and 10 are exact and
//! decide the exit code; criterion 9 is a trend measurement and is only
//! reported. `OVD_SKIP_BENCH=1` skips it.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ovd_cli::commands::{evaluate_images, HOLDOUT_OFFSET};
use ovd_cli::config::RunConfig;
use ovd_cli::dataset::{base_vocabulary, training_samples};
use ovd_core::boxes::BoxCxcywh;
use ovd_core::gradcheck::run_suite;
use ovd_core::loss::{alignment_term, LossWeights};
use ovd_core::metrics::{average_precision, harmonic_mean, Detection, GtInstance, Protocol};
use ovd_core::model::{train, Ablation, Model};
use ovd_core::oracle::{alignment_loss_gap, gate_report, masking_gap, matcher_mismatches, permutation_report};
use ovd_core::scene::{generate_scene, ObjectAnnotation, Partition, RgbImage, Scene};
use ovd_core::text::embed_class_names;
use ovd_core::tiling::{tile_image, TileSpec};

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.conf");

struct Line {
    id: u32,
    pass: bool,
    detail: String,
    /// Counted toward the exit code.
    gating: bool,
}

fn line(id: u32, pass: bool, detail: impl Into<String>) -> Line {
    Line { id, pass, detail: detail.into(), gating: true }
}

fn or_error(id: u32, r: anyhow::Result<Line>) -> Line {
    r.unwrap_or_else(|e| line(id, false, format!("error: {e:#}")))
}

fn c1() -> anyhow::Result<Line> {
    let t = Instant::now();
    let reports = run_suite(100, 0x9d)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    let bad: Vec<_> = reports.iter().filter(|c| !(c.report.max_rel_err < 1e-4)).map(|c| c.name).collect();
    let min_n = reports.iter().filter(|c| c.name != "encode_image").map(|c| c.instances).min().unwrap_or(0);
    Ok(line(
        1,
        bad.is_empty() && min_n >= 100 && secs < 60.0,
        format!("{} cases, >= {min_n} instances each, worst rel err {worst:.2e}, {secs:.1}s; failing {bad:?}", reports.len()),
    ))
}

fn c2() -> anyhow::Result<Line> {
    let (bad, n) = matcher_mismatches(1000, 7, 0x4d41)?;
    Ok(line(2, bad == 0, format!("{bad}/{n} matrices differ from the exhaustive minimum")))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn c3() -> anyhow::Result<Line> {
    let gap = alignment_loss_gap(1000, 0x1055)?;
    let w = LossWeights::default();
    let a = alignment_term(logit(0.5), 1.0, &w);
    let b = alignment_term(logit(0.5), 0.0, &w);
    let pass = gap <= 1e-9 && (a - 0.693147).abs() < 5e-7 && (b - 0.129965).abs() < 5e-7;
    Ok(line(3, pass, format!("max gap {gap:.1e} over 1000 grids; u=1: {a:.6}, u=0: {b:.6}")))
}

fn c4() -> Line {
    let hit: BoxCxcywh = [0.5, 0.5, 0.2, 0.2];
    let miss: BoxCxcywh = [0.1, 0.1, 0.05, 0.05];
    let d = |bbox, score| Detection { image_id: 0, class: 0, bbox, score };
    let g = [GtInstance { image_id: 0, class: 0, bbox: hit }];
    let got = [
        average_precision(&[d(hit, 0.9)], &g, 0.5),
        average_precision(&[d(hit, 0.9), d(miss, 0.8)], &g, 0.5),
        average_precision(&[d(miss, 0.9), d(hit, 0.8)], &g, 0.5),
    ];
    let hm = harmonic_mean(0.8, 0.2);
    let pass = got == [Some(1.0), Some(1.0), Some(0.5)] && hm == 0.32;
    line(4, pass, format!("AP {got:?}, HM(0.8, 0.2) = {hm}"))
}

fn c5() -> anyhow::Result<Line> {
    let gap = masking_gap(50, 0x3a5c)?;
    Ok(line(5, gap < 1e-9, format!("max change {gap:.1e} over 50 passes")))
}

fn c6() -> anyhow::Result<Line> {
    let r = permutation_report(50, 0x9e12)?;
    Ok(line(
        6,
        r.score_gap < 1e-9 && r.box_gap < 1e-9 && r.token_set_changes == 0,
        format!(
            "score gap {:.1e}, box gap {:.1e}, token-set changes {} over 50 passes",
            r.score_gap, r.box_gap, r.token_set_changes
        ),
    ))
}

fn c7() -> anyhow::Result<Line> {
    let r = gate_report(7)?;
    Ok(line(
        7,
        r.feature_gap < 1e-6 && r.query_gap < 1e-6 && r.zero_value_identity,
        format!(
            "|F'-F| {:.1e}, |Q'-Q| {:.1e} (ungated {:.2}), zero W_v bitwise identity {}",
            r.feature_gap, r.query_gap, r.ungated_gap, r.zero_value_identity
        ),
    ))
}

fn c8() -> anyhow::Result<Line> {
    let img = RgbImage::new(1600, 1600);
    let obj = ObjectAnnotation { class_name: "red ring".into(), bbox: [780.0, 300.0, 40.0, 30.0] };
    let tiles = tile_image(&img, &[obj], &TileSpec::default())?;
    let offsets: Vec<_> = tiles.iter().map(|t| t.offset).collect();
    let grid = offsets == [(0, 0), (800, 0), (0, 800), (800, 800)];
    let halves = tiles[0].objects.len() == 1
        && tiles[1].objects.len() == 1
        && tiles[0].objects[0].bbox == [780.0, 300.0, 20.0, 30.0]
        && tiles[1].objects[0].bbox == [0.0, 300.0, 20.0, 30.0]
        && tiles[2].objects.is_empty()
        && tiles[3].objects.is_empty();
    Ok(line(8, grid && halves, format!("offsets {offsets:?}; straddling box halves kept: {halves}")))
}

struct RunResult {
    closed_base: f64,
    gzsd_base: f64,
    gzsd_novel: f64,
    hm: f64,
}

fn bench_run(cfg: &RunConfig, data: &BenchData, ablation: Ablation, seed: u64) -> anyhow::Result<RunResult> {
    let mut mc = cfg.model;
    mc.ablation = ablation;
    let mut model = Model::new(mc, seed)?;
    let mut tc = cfg.train;
    tc.seed = seed;
    let bank = embed_class_names(&data.train_vocab, mc.text_dim)?;
    train(&mut model, &data.samples, &bank, data.train_vocab.len(), &tc, |_| {})?;

    let mut closed = cfg.clone();
    closed.protocol = Protocol::Closed;
    let (c, _) = evaluate_images(&model, &data.holdout.0, &data.holdout.1, &data.train_vocab, &closed)?;
    let mut gz = cfg.clone();
    gz.protocol = Protocol::Gzsd;
    let (g, _) = evaluate_images(&model, &data.eval.0, &data.eval.1, &data.vocab, &gz)?;
    Ok(RunResult {
        closed_base: c.overall.ap50,
        gzsd_base: g.base.map(|m| m.ap50).unwrap_or(0.0),
        gzsd_novel: g.novel.map(|m| m.ap50).unwrap_or(0.0),
        hm: g.hm.map(|m| m.ap50).unwrap_or(0.0),
    })
}

type Records = (Vec<ovd_core::scene::AnnotationRecord>, Vec<RgbImage>);

struct BenchData {
    vocab: ovd_core::text::ClassVocabulary,
    train_vocab: ovd_core::text::ClassVocabulary,
    samples: Vec<ovd_core::model::TrainSample>,
    eval: Records,
    holdout: Records,
}

fn scenes(cfg: &RunConfig, partition: Partition, offset: usize, count: usize) -> anyhow::Result<Records> {
    let list: Vec<Scene> = (0..count)
        .map(|i| {
            let mut s = generate_scene(&cfg.scenes, partition, offset + i)?;
            s.record.image_id = i as u64;
            Ok(s)
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(list.into_iter().map(|s| (s.record, s.image)).unzip())
}

fn c9() -> anyhow::Result<Line> {
    let t = Instant::now();
    let cfg = RunConfig::resolve(Some(Path::new(DESK)), &[])?;
    let vocab = cfg.scenes.vocabulary()?;
    let train_vocab = base_vocabulary(&vocab)?;
    let (tr, ti) = scenes(&cfg, Partition::Train, 0, cfg.train_scenes)?;
    let data = BenchData {
        samples: training_samples(&tr, &ti, &train_vocab)?,
        eval: scenes(&cfg, Partition::Eval, 0, cfg.eval_scenes)?,
        holdout: scenes(&cfg, Partition::Train, HOLDOUT_OFFSET, cfg.eval_scenes)?,
        vocab,
        train_vocab,
    };
    let variants = [
        ("full", Ablation::default()),
        ("no-modules", Ablation::none()),
        ("ungated", Ablation { gate: false, ..Ablation::default() }),
    ];
    let seeds = [1u64, 2, 3];
    let mut mean = [[0.0f64; 4]; 3];
    for (v, (name, abl)) in variants.iter().enumerate() {
        for &seed in &seeds {
            let r = bench_run(&cfg, &data, *abl, seed)?;
            println!(
                "    {name:<10} seed {seed}: closed base {:.3}  gzsd base {:.3} novel {:.3} hm {:.3}  ({:.0}s elapsed)",
                r.closed_base,
                r.gzsd_base,
                r.gzsd_novel,
                r.hm,
                t.elapsed().as_secs_f64()
            );
            for (k, x) in [r.closed_base, r.gzsd_base, r.gzsd_novel, r.hm].into_iter().enumerate() {
                mean[v][k] += x / seeds.len() as f64;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let a = mean[0][0] >= 0.85;
    let b = mean[0][2] >= mean[1][2];
    let c = mean[0][3] >= mean[2][3];
    let time_ok = secs <= 1800.0;
    Ok(Line {
        id: 9,
        pass: a && b && c && time_ok,
        detail: format!(
            "(a) closed base AP50 {:.3} >= 0.85: {a}; (b) novel AP50 full {:.3} vs no-modules {:.3}: {b}; \
             (c) HM full {:.3} vs ungated {:.3}: {c}; {:.0}s <= 1800s: {time_ok}",
            mean[0][0], mean[0][2], mean[1][2], mean[0][3], mean[2][3], secs
        ),
        gating: false,
    })
}

fn c10() -> anyhow::Result<Line> {
    let t = tempfile::tempdir()?;
    let bin = env!("CARGO_BIN_EXE_ovd");
    let run = |args: &[&str]| -> anyhow::Result<()> {
        let o = Command::new(bin).args(args).output()?;
        anyhow::ensure!(o.status.success(), "ovd {args:?}: {}", String::from_utf8_lossy(&o.stderr));
        Ok(())
    };
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let data = t.path().join("data");
    run(&["--config", DESK, "generate", "--out", &p(&data), "--scenes", "8", "--eval-scenes", "6"])?;
    let mut files = Vec::new();
    for k in 0..2 {
        let r = t.path().join(format!("run{k}"));
        let e = t.path().join(format!("eval{k}"));
        run(&["--config", DESK, "--deterministic", "train", "--data", &p(&data), "--out", &p(&r), "--steps", "40", "--seed", "5", "--log-every", "0"])?;
        run(&["--config", DESK, "--deterministic", "eval", "--data", &p(&data), "--checkpoint", &p(&r.join("model.ckpt")), "--out", &p(&e), "--seed", "5"])?;
        let mut set = Vec::new();
        for f in ["model.ckpt", "loss_curve.csv"] {
            set.push(std::fs::read(r.join(f))?);
        }
        for f in ["report.txt", "summary.json", "per_class.csv"] {
            set.push(std::fs::read(e.join(f))?);
        }
        files.push(set);
    }
    let same = files[0] == files[1];
    Ok(line(10, same, format!("checkpoint, loss curve and 3 report files byte-identical across two runs: {same}")))
}

fn print(l: &Line) {
    let tag = if l.pass { "PASS" } else { "FAIL" };
    let note = if l.gating { "" } else { " [reported, not gating]" };
    println!("criterion {:>2}: {tag}{note} - {}", l.id, l.detail);
}

fn main() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut run = |l: Line| {
        print(&l);
        lines.push(l);
    };
    run(or_error(1, c1()));
    run(or_error(2, c2()));
    run(or_error(3, c3()));
    run(c4());
    run(or_error(5, c5()));
    run(or_error(6, c6()));
    run(or_error(7, c7()));
    run(or_error(8, c8()));
    if std::env::var("OVD_SKIP_BENCH").is_ok_and(|v| v == "1") {
        println!("criterion  9: SKIPPED (OVD_SKIP_BENCH=1)");
    } else {
        let mut l = or_error(9, c9());
        l.gating = false;
        run(l);
    }
    run(or_error(10, c10()));
    let failed: Vec<u32> = lines.iter().filter(|l| l.gating && !l.pass).map(|l| l.id).collect();
    println!(
        "acceptance: {}/{} passed in {:.0?}",
        lines.iter().filter(|l| l.pass).count(),
        lines.len(),
        Duration::from_secs(start.elapsed().as_secs())
    );
    if !failed.is_empty() {
        eprintln!("exact criteria failed: {failed:?}");
        std::process::exit(1);
    }
}

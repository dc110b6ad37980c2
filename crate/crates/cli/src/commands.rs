use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use epimask::check::{gradcheck_suite, CheckResult};
use epimask::epipolar::{build_epipolar_mask, symmetric_epipolar_distance, CoarseGrid};
use epimask::evaluation::{aggregate, evaluate_matches, top_k_matches, Aggregate, PairMetrics, Precision, ScoredMatch};
use epimask::geometry::{affine_fundamental_from_cameras, AffineFundamental};
use epimask::groundtruth::{generate_scene, warp_gt};
use epimask::io::encode_pgm;
use epimask::matcher::{load_weights, Checkpoint, Matcher, TrainStage};
use epimask::train::{start_checkpoint, train_toy, HistoryRecord, TrainConfig, TrainPair};
use epimask::Pixel;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::Run;
use crate::scene_dir::{read_camera, write_scene, SceneDir};

pub fn cmd_scene(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let scene = generate_scene(&cfg.scene)?;
    let mut run = Run::start("scene", cfg, cfg.scene.seed, out)?;
    write_scene(&mut run, &scene.data)?;
    run.finish()?;
    Ok(())
}

pub struct MaskArgs {
    pub left: PathBuf,
    pub right: PathBuf,
    pub p: usize,
    pub r_c: usize,
    pub b: f64,
    pub pixel: Option<Pixel>,
    pub f_scale: f64,
    pub scene: Option<PathBuf>,
}

fn panel(p: usize, mut white: impl FnMut(Pixel) -> bool) -> Array2<u8> {
    Array2::from_shape_fn((p, p), |(r, c)| if white(Pixel::new(r as f64 + 0.5, c as f64 + 0.5)) { 255 } else { 0 })
}

/// Band, epipolar line and coarse-mask row of one left pixel, all in right-image coordinates.
pub fn mask_panels(f: &AffineFundamental, p: usize, r_c: usize, b: f64, px: &Pixel) -> Result<[Array2<u8>; 3], CliError> {
    if !(b > 0.0) {
        return Err(CliError::config("b", format!("band width must be positive, got {b}")));
    }
    if r_c == 0 || p % r_c != 0 {
        return Err(CliError::config("r_c", format!("must divide p = {p}")));
    }
    let mut degenerate = None;
    let band = panel(p, |q| match symmetric_epipolar_distance(f, px, &q) {
        Ok(d) => d < 0.5 * b,
        Err(e) => {
            degenerate.get_or_insert(e.to_string());
            false
        }
    });
    if let Some(e) = degenerate {
        return Err(CliError::Numerical(e));
    }
    let line = f.right_line(px);
    let n = line.x.hypot(line.y);
    let line_panel = panel(p, |q| (q.homogeneous().dot(&line) / n).abs() < 0.5);
    let grid = CoarseGrid::square(p, r_c);
    let mask = build_epipolar_mask(f, &grid, &grid, b).map_err(|e| CliError::Numerical(e.to_string()))?;
    let cell = grid.cell_of(px).ok_or_else(|| CliError::config("pixel", format!("({}, {}) is outside the patch", px.row, px.col)))?;
    let coarse = panel(p, |q| grid.cell_of(&q).is_some_and(|j| mask.admissible[(cell, j)]));
    Ok([band, line_panel, coarse])
}

pub fn cmd_mask(cfg: &RunConfig, args: &MaskArgs, out: &Path) -> Result<(), CliError> {
    let cam_l = read_camera(&args.left)?;
    let cam_r = read_camera(&args.right)?;
    let f = affine_fundamental_from_cameras(&cam_l, &cam_r)?.scaled(args.f_scale);
    let px = args.pixel.unwrap_or(Pixel::new(args.p as f64 / 2.0, args.p as f64 / 2.0));
    let [band, line, coarse] = mask_panels(&f, args.p, args.r_c, args.b, &px)?;
    let mut run = Run::start("mask", cfg, 0, out)?;
    run.input(&args.left)?;
    run.input(&args.right)?;
    run.write("band.pgm", &encode_pgm(&band))?;
    run.write("line.pgm", &encode_pgm(&line))?;
    run.write("coarse.pgm", &encode_pgm(&coarse))?;
    if let Some(dir) = &args.scene {
        let s = SceneDir::load(dir)?;
        s.record_inputs(&mut run)?;
        if s.data.p() != args.p {
            return Err(CliError::config("p", format!("scene patches are {} px", s.data.p())));
        }
        // Right image dimmed outside the band, ground-truth point as a white cross.
        let mut gt = Array2::from_shape_fn(band.dim(), |ix| if band[ix] > 0 { s.data.image_r[ix] } else { s.data.image_r[ix] / 4 });
        if let Some(q) = warp_gt(&s.data, &px, cfg.eval.delta_3d) {
            let (r, c) = (q.row.floor() as i64, q.col.floor() as i64);
            for (dr, dc) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (rr, cc) = (r + dr, c + dc);
                if (0..args.p as i64).contains(&rr) && (0..args.p as i64).contains(&cc) {
                    gt[(rr as usize, cc as usize)] = 255;
                }
            }
        }
        run.write("gt.pgm", &encode_pgm(&gt))?;
    }
    run.finish()?;
    Ok(())
}

/// One row of `matches.csv`: left and right pixel `(row, col)`, confidence and window variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub i_row: f64,
    pub i_col: f64,
    pub j_row: f64,
    pub j_col: f64,
    pub confidence: f64,
    pub sigma2: f64,
}

pub const MATCH_HEADER: [&str; 6] = ["i_row", "i_col", "j_row", "j_col", "confidence", "sigma2"];

impl MatchRow {
    fn scored(&self) -> ScoredMatch {
        ScoredMatch { left: Pixel::new(self.i_row, self.i_col), right: Pixel::new(self.j_row, self.j_col), confidence: self.confidence }
    }
}

pub fn encode_matches(rows: &[MatchRow]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(vec![]);
    w.write_record(MATCH_HEADER).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

pub fn decode_matches(bytes: &[u8], path: &Path) -> Result<Vec<MatchRow>, CliError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rd.headers().map_err(|e| CliError::Data(format!("{} line 1: {e}", path.display())))?.clone();
    if header.iter().ne(MATCH_HEADER) {
        return Err(CliError::Data(format!("{} line 1: expected header {}", path.display(), MATCH_HEADER.join(","))));
    }
    let mut rows = vec![];
    for rec in rd.deserialize::<MatchRow>() {
        let row = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            CliError::Data(format!("{} line {line}: {e}", path.display()))
        })?;
        let vals = [row.i_row, row.i_col, row.j_row, row.j_col, row.confidence, row.sigma2];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Data(format!("{} line {}: non-finite value", path.display(), rows.len() + 2)));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Contents of `metrics.json`, written identically by `match` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
    pub precision: BTreeMap<String, Option<Precision>>,
    pub aggregate: Aggregate,
}

fn metrics_for(cfg: &RunConfig, scene: &SceneDir, rows: &[MatchRow]) -> Result<MetricsReport, CliError> {
    let scored: Vec<ScoredMatch> = rows.iter().map(MatchRow::scored).collect();
    let id = scene.pair_id();
    let (pm, prec) = evaluate_matches(&id, &scored, &scene.data, (&scene.cfg.left_view, &scene.cfg.right_view), &cfg.eval.options())?;
    let agg = aggregate(std::slice::from_ref(&pm), cfg.eval.bin_width);
    Ok(MetricsReport { pairs: vec![pm], precision: BTreeMap::from([(id, prec)]), aggregate: agg })
}

fn to_json(v: &impl Serialize) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("report serializes");
    b.push(b'\n');
    b
}

pub struct MatchArgs {
    pub scene: PathBuf,
    pub weights: PathBuf,
    /// Check the weights against the config's matcher section.
    pub check_config: bool,
    pub dump_attention: Option<usize>,
}

pub fn cmd_match(cfg: &RunConfig, args: &MatchArgs, out: &Path) -> Result<(), CliError> {
    let scene = SceneDir::load(&args.scene)?;
    let matcher = load_weights(&args.weights, args.check_config.then_some(&cfg.matcher))?;
    if scene.data.p() != matcher.cfg.p {
        return Err(CliError::config("matcher.p", format!("weights expect {} px patches, scene has {}", matcher.cfg.p, scene.data.p())));
    }
    let mut run = Run::start("match", cfg, cfg.eval.ransac.seed, out)?;
    scene.record_inputs(&mut run)?;
    run.input(&args.weights)?;
    let (il, ir) = scene.data.images_f64();
    let f0 = affine_fundamental_from_cameras(&scene.data.cam_l, &scene.data.cam_r)?;
    let epoch = matcher.cfg.n_m;
    let (output, dumps) = match args.dump_attention {
        Some(k) => matcher.forward_with_attention(&il, &ir, Some(&f0), epoch, k)?,
        None => (matcher.forward(&il, &ir, Some(&f0), epoch)?, vec![]),
    };
    let kept = top_k_matches(&output.fine, cfg.eval.top_k);
    let rows: Vec<MatchRow> = kept
        .iter()
        .map(|m| MatchRow { i_row: m.left.row, i_col: m.left.col, j_row: m.right.row, j_col: m.right.col, confidence: m.confidence, sigma2: m.sigma2 })
        .collect();
    let report = metrics_for(cfg, &scene, &rows)?;
    run.write("matches.csv", &encode_matches(&rows))?;
    run.write("metrics.json", &to_json(&report))?;
    if args.dump_attention.is_some() {
        let mut lines = vec![];
        for d in &dumps {
            serde_json::to_writer(&mut lines, d).expect("dump serializes");
            lines.push(b'\n');
        }
        run.write("attention.jsonl", &lines)?;
    }
    run.finish()?;
    Ok(())
}

pub struct TrainArgs {
    pub scenes: Vec<PathBuf>,
    pub init: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

fn read_history(path: &Path) -> Result<Vec<HistoryRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| serde_json::from_str(l).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), k + 1))))
        .collect()
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<(), CliError> {
    let tc: &TrainConfig = &cfg.train;
    if args.scenes.is_empty() {
        return Err(CliError::Usage("train needs at least one --scene".into()));
    }
    let mut run = Run::start("train", cfg, tc.seed, out)?;
    let mut prior = vec![];
    let start = match (&args.resume, &args.init, tc.stage) {
        (Some(ckpt), _, _) => {
            run.input(ckpt)?;
            let hist = ckpt.with_file_name("history.jsonl");
            if hist.exists() {
                run.input(&hist)?;
                prior = read_history(&hist)?;
            }
            Checkpoint::load(ckpt)?
        }
        (None, None, TrainStage::Lora) => {
            return Err(CliError::Usage("--stage lora needs base weights via --init (or a lora checkpoint via --resume)".into()))
        }
        (None, Some(w), stage) => {
            run.input(w)?;
            let mut m = load_weights(w, None)?;
            if stage == TrainStage::Lora && !m.has_lora() {
                m.attach_lora();
            }
            start_checkpoint(m, stage)
        }
        (None, None, TrainStage::Base) => start_checkpoint(Matcher::new(cfg.matcher.clone())?, TrainStage::Base),
    };
    let mut pairs = vec![];
    for dir in &args.scenes {
        let s = SceneDir::load(dir)?;
        s.record_inputs(&mut run)?;
        if s.data.p() != start.matcher.cfg.p {
            return Err(CliError::config("matcher.p", format!("{} has {} px patches", dir.display(), s.data.p())));
        }
        pairs.push(TrainPair::from_scene(&s.data, &start.matcher.cfg, cfg.eval.delta_3d)?);
    }
    let outcome = train_toy(start, &pairs, tc)?;
    outcome.checkpoint.save(&run.path("checkpoint.bin"))?;
    run.written("checkpoint.bin")?;
    epimask::matcher::save_weights(&run.path("weights.bin"), &outcome.checkpoint.matcher)?;
    run.written("weights.bin")?;
    let mut lines = vec![];
    for h in prior.iter().chain(&outcome.history) {
        serde_json::to_writer(&mut lines, h).expect("history serializes");
        lines.push(b'\n');
    }
    run.write("history.jsonl", &lines)?;
    run.finish()?;
    Ok(())
}

pub struct EvalArgs {
    pub matches: PathBuf,
    pub scene: PathBuf,
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, out: &Path) -> Result<(), CliError> {
    let bytes = std::fs::read(&args.matches).map_err(|e| CliError::Data(format!("{}: {e}", args.matches.display())))?;
    let rows = decode_matches(&bytes, &args.matches)?;
    let scene = SceneDir::load(&args.scene)?;
    let mut run = Run::start("eval", cfg, cfg.eval.ransac.seed, out)?;
    run.input(&args.matches)?;
    scene.record_inputs(&mut run)?;
    let report = metrics_for(cfg, &scene, &rows)?;
    run.write("metrics.json", &to_json(&report))?;
    let mut w = csv::Writer::from_writer(vec![]);
    for p in &report.pairs {
        w.serialize(p).expect("in-memory write");
    }
    run.write("pairs.csv", &w.into_inner().expect("in-memory write"))?;
    run.finish()?;
    Ok(())
}

/// Runs the suite and returns it with a one-line-per-check report.
pub fn cmd_gradcheck() -> Result<(Vec<CheckResult>, String), CliError> {
    let results = gradcheck_suite()?;
    let mut text = String::new();
    for r in &results {
        let status = if r.report.passed { "PASS" } else { "FAIL" };
        text.push_str(&format!(
            "{status} {:<22} max_rel_err {:.3e} tol {:.0e} checked {}\n",
            r.name, r.report.max_rel_err, r.report.tolerance, r.report.checked
        ));
    }
    Ok((results, text))
}

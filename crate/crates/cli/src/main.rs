//! `taxistat`: batch driver for parking detection, status-model training,
//! inference and evaluation. Every step writes its artifacts plus a
//! `<step>.manifest.json` into the output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use taxistat_core::calibration::LocalClassifier;
use taxistat_core::features::{RoadStats, FEATURE_NAMES};
use taxistat_core::harness::{self, ComparisonOptions};
use taxistat_core::hsmm::{self, HsmmModel, LabeledSequence, State};
use taxistat_core::parking::{parking_table, HistoryStore, ScoredCandidate, PARKING_FEATURE_NAMES};
use taxistat_core::pipeline::{self as pl, FileDigest, Manifest, Params, PipelineConfig};
use taxistat_core::poi::PoiIndex;
use taxistat_core::road::RoadNetwork;
use taxistat_core::synth::{self, BehaviorParams, WorldParams};
use taxistat_core::tree::TreeModel;
use taxistat_core::{io, Label, Trajectory};

const TRAJECTORIES: &str = "trajectories.jsonl";
const NETWORK: &str = "network.json";
const POIS: &str = "pois.jsonl";
const CANDIDATES: &str = "candidates.jsonl";
const HISTORY: &str = "history.jsonl";
const PARKING_FILTER: &str = "parking_filter.json";
const ROAD_STATS: &str = "road_stats.json";
const FEATURES: &str = "features.csv";
const STATUS_TREE: &str = "status_tree.json";
const CLASSIFIER: &str = "classifier.json";
const OOF: &str = "oof_scores.csv";
const HSMM: &str = "hsmm.json";
const STATUSES: &str = "statuses.jsonl";

#[derive(Parser)]
#[command(name = "taxistat", version, about = "Infer parked / occupied / vacant status of taxi GPS points")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON pipeline config; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; never changes outputs [default: all cores].
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory [default: config out_dir, else "."].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Trajectory file [default: <out>/trajectories.jsonl].
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Road network file [default: <out>/network.json].
    #[arg(long, global = true)]
    network: Option<PathBuf>,
    /// POI file [default: <out>/pois.jsonl].
    #[arg(long, global = true)]
    pois: Option<PathBuf>,
    /// Directory holding trained models [default: <out>].
    #[arg(long, global = true)]
    models: Option<PathBuf>,
    /// Stay-point radius delta in metres [default: 50].
    #[arg(long, global = true)]
    delta_m: Option<f64>,
    /// Minimum stay duration tau in seconds [default: 180].
    #[arg(long, global = true)]
    tau_s: Option<f64>,
    /// Sampling gap that splits trajectories, seconds [default: 600].
    #[arg(long, global = true)]
    max_gap_s: Option<i64>,
    /// Observation bins B [default: 100].
    #[arg(long, global = true)]
    bins: Option<usize>,
    /// Maximum state duration D in samples [default: 20].
    #[arg(long, global = true)]
    max_duration: Option<usize>,
    /// Random seed for generation and fold assignment [default: 42].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cross-validation folds for the parking filter [default: 10].
    #[arg(long, global = true)]
    cv_folds: Option<usize>,
    /// Out-of-fold groups for calibration [default: 5].
    #[arg(long, global = true)]
    calibration_folds: Option<usize>,
    /// Row cap for status trees, 0 for all rows [default: 200000].
    #[arg(long, global = true)]
    max_tree_rows: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city and a labelled fleet.
    Gen {
        #[arg(long, default_value_t = 250)]
        taxis: usize,
        #[arg(long, default_value_t = 7)]
        days: usize,
        /// Grid blocks per side.
        #[arg(long, default_value_t = 20)]
        blocks: usize,
    },
    /// Detect parking candidates; decide them with a filter, or with labels when none is given.
    Parking {
        /// Trained parking filter.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Prior parking history; the updated store is written to <out>/history.jsonl.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Export point features of the labelled running segments.
    Features,
    /// Train a decision tree.
    TrainTree {
        #[arg(long, value_enum)]
        task: Task,
    },
    /// Fit the probability calibration from out-of-fold tree scores.
    Calibrate,
    /// Fit the duration model from the out-of-fold scores.
    TrainHsmm,
    /// Label every point of the data as P, O or N.
    Infer {
        /// Prior parking history; the updated store is written to <out>/history.jsonl.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Method comparison, D sweep, parking cross-validation and three-class confusion.
    Eval {
        /// Taxis held out for testing (the last ids in sorted order).
        #[arg(long, default_value_t = 50)]
        test_taxis: usize,
        /// Training sizes in taxis [default: all training taxis].
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// D values for the sweep.
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,15,20,25,30,40")]
        sweep: Vec<usize>,
    },
    /// Rank features by mutual information with the labels.
    Mi {
        #[arg(long, value_enum)]
        task: Task,
        /// Equal-frequency bins per feature.
        #[arg(long, default_value_t = 10)]
        mi_bins: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Parking,
    Status,
}

struct Ctx {
    params: Params,
    out: PathBuf,
    data: PathBuf,
    network: PathBuf,
    pois: PathBuf,
    models: PathBuf,
    history: Option<PathBuf>,
}

impl Ctx {
    fn new(g: &Global) -> Result<Self> {
        let cfg = match &g.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        let mut params = cfg.params;
        macro_rules! set {
            ($($field:ident),*) => { $(if let Some(v) = g.$field { params.$field = v; })* };
        }
        set!(delta_m, tau_s, max_gap_s, bins, max_duration, seed, cv_folds, calibration_folds, max_tree_rows);
        params.validate()?;
        let out = g.out.clone().or(cfg.paths.out_dir).unwrap_or_else(|| PathBuf::from("."));
        let pick = |flag: &Option<PathBuf>, conf: Option<PathBuf>, name: &str| {
            flag.clone().or(conf).unwrap_or_else(|| out.join(name))
        };
        Ok(Self {
            data: pick(&g.data, cfg.paths.data, TRAJECTORIES),
            network: pick(&g.network, cfg.paths.network, NETWORK),
            pois: pick(&g.pois, cfg.paths.pois, POIS),
            models: g.models.clone().or(cfg.paths.models).unwrap_or_else(|| out.clone()),
            history: cfg.paths.history,
            params,
            out,
        })
    }

    fn model(&self, name: &str) -> PathBuf {
        self.models.join(name)
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn world(&self) -> Result<(Vec<Trajectory>, RoadNetwork, PoiIndex)> {
        let trajs = io::load_trajectories(&self.data)?;
        let net = io::load_network(&self.network)?;
        let pois = PoiIndex::new(io::load_pois(&self.pois)?);
        Ok((trajs, net, pois))
    }

    fn world_inputs(&self) -> Vec<&Path> {
        vec![&self.data, &self.network, &self.pois]
    }

    fn finish(&self, step: &str, inputs: &[&Path], outputs: &[&str], extra: Value) -> Result<()> {
        let mut m = Manifest::new(step, &self.params);
        if let Value::Object(map) = extra {
            m.extra = map.into_iter().collect();
        }
        m.inputs = inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?;
        m.outputs = outputs
            .iter()
            .map(|n| FileDigest::of(&self.output(n)))
            .collect::<Result<_, _>>()?;
        m.save(&self.output(&format!("{step}.manifest.json")))?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(&r)?);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_history(path: Option<&PathBuf>) -> Result<HistoryStore> {
    Ok(match path {
        Some(p) => HistoryStore::load(p)?,
        None => HistoryStore::new(),
    })
}

/// Offset of every piece inside its taxi's full trajectory.
fn piece_offsets(pieces: &[Trajectory]) -> Vec<usize> {
    let mut out = Vec::with_capacity(pieces.len());
    let mut at = 0;
    for (i, p) in pieces.iter().enumerate() {
        if i > 0 && pieces[i - 1].taxi_id != p.taxi_id {
            at = 0;
        }
        out.push(at);
        at += p.len();
    }
    out
}

fn candidate_records(pieces: &[Trajectory], scored: &[(usize, ScoredCandidate)]) -> Vec<Value> {
    let offsets = piece_offsets(pieces);
    scored
        .iter()
        .map(|(i, s)| {
            let c = &s.candidate;
            let features: serde_json::Map<String, Value> = PARKING_FEATURE_NAMES
                .iter()
                .zip(s.features.to_row())
                .map(|(n, v)| (n.to_string(), json!(v)))
                .collect();
            let center = c.center();
            json!({
                "taxi": c.taxi_id,
                "start_idx": offsets[*i] + c.start_index,
                "end_idx": offsets[*i] + c.end_index,
                "t_start": c.t_start(),
                "t_end": c.t_end(),
                "center": [center.lat, center.lon],
                "features": features,
                "accepted": s.accepted,
                "prob": s.prob,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct OofRow {
    segment: usize,
    label: Label,
    raw: f64,
    calibrated: f64,
    bin: usize,
}

fn truth_segments(ctx: &Ctx, trajs: &[Trajectory]) -> Result<Vec<Trajectory>> {
    Ok(pl::truth_segments(&pl::split_pieces(trajs, ctx.params.max_gap_s))?)
}

fn cmd_gen(ctx: &Ctx, taxis: usize, days: usize, blocks: usize) -> Result<()> {
    let wp = WorldParams {
        blocks,
        ..WorldParams::default()
    };
    let beh = BehaviorParams::default();
    let world = synth::generate_world(&wp, ctx.params.seed)?;
    let fleet = synth::simulate_fleet(&world, &beh, taxis, days, ctx.params.seed)?;
    io::save_trajectories(ctx.output(TRAJECTORIES), &fleet)?;
    io::save_network(ctx.output(NETWORK), &world.network)?;
    io::save_pois(ctx.output(POIS), &world.pois)?;
    let extra = json!({ "taxis": taxis, "days": days, "world": wp, "behavior": beh });
    ctx.finish("gen", &[], &[TRAJECTORIES, NETWORK, POIS], extra)
}

fn cmd_parking(ctx: &Ctx, model: Option<&PathBuf>, history: Option<&PathBuf>) -> Result<()> {
    let (trajs, net, pois) = ctx.world()?;
    let pieces = pl::split_pieces(&trajs, ctx.params.max_gap_s);
    let mut store = load_history(history.or(ctx.history.as_ref()))?;
    let scored = match model {
        Some(m) => {
            let filter: TreeModel = read_json(m)?;
            pl::apply_parking_model(&pieces, &net, &pois, &ctx.params, &filter, &mut store)?
        }
        None => {
            let mut decide_err = None;
            let out = pl::parking_stage(&pieces, &net, &pois, &ctx.params, &mut store, |c, _| {
                if c.points.iter().any(|p| p.label.is_none()) && decide_err.is_none() {
                    decide_err = Some(c.taxi_id.clone());
                }
                let t = c.is_true_park();
                Ok((t as u8 as f64, t))
            })?;
            if let Some(taxi) = decide_err {
                bail!("taxi {taxi} has unlabelled points; pass --model to decide candidates");
            }
            out
        }
    };
    write_jsonl(&ctx.output(CANDIDATES), candidate_records(&pieces, &scored))?;
    store.save(&ctx.output(HISTORY))?;
    let mut inputs = ctx.world_inputs();
    inputs.extend(model.map(PathBuf::as_path));
    inputs.extend(history.map(PathBuf::as_path));
    let mode = if model.is_some() { "filter" } else { "labels" };
    ctx.finish("parking", &inputs, &[CANDIDATES, HISTORY], json!({ "decision": mode }))
}

fn cmd_features(ctx: &Ctx) -> Result<()> {
    let (trajs, net, pois) = ctx.world()?;
    let segs = truth_segments(ctx, &trajs)?;
    let stats = pl::build_stats(&segs, &net)?;
    let rows = pl::segment_features(&segs, &net, &pois, &stats)?;
    let mut w = csv::Writer::from_path(ctx.output(FEATURES))?;
    let mut header = vec!["taxi", "t", "label"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header)?;
    for (s, fs) in segs.iter().zip(&rows) {
        for (p, f) in s.points.iter().zip(fs) {
            let mut rec = vec![
                s.taxi_id.clone(),
                p.t.to_string(),
                p.label.map_or(String::new(), |l| l.as_str().to_string()),
            ];
            rec.extend(f.0.iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    write_json(&ctx.output(ROAD_STATS), &stats)?;
    ctx.finish("features", &ctx.world_inputs(), &[FEATURES, ROAD_STATS], json!({}))
}

fn cmd_train_tree(ctx: &Ctx, task: Task) -> Result<()> {
    let (trajs, net, pois) = ctx.world()?;
    match task {
        Task::Parking => {
            let pieces = pl::split_pieces(&trajs, ctx.params.max_gap_s);
            let (scored, _) = pl::parking_truth_pass(&pieces, &net, &pois, &ctx.params)?;
            let model = harness::fit_parking_filter(&scored, &ctx.params)?;
            write_json(&ctx.output(PARKING_FILTER), &model)?;
            ctx.finish(
                "train-tree-parking",
                &ctx.world_inputs(),
                &[PARKING_FILTER],
                json!({ "task": "parking", "candidates": scored.len() }),
            )
        }
        Task::Status => {
            let segs = truth_segments(ctx, &trajs)?;
            let stats = pl::build_stats(&segs, &net)?;
            let data = pl::status_data(&segs, &net, &pois, &stats)?;
            let tree = pl::train_status_tree(&data, &ctx.params)?;
            write_json(&ctx.output(STATUS_TREE), &tree)?;
            write_json(&ctx.output(ROAD_STATS), &stats)?;
            ctx.finish(
                "train-tree-status",
                &ctx.world_inputs(),
                &[STATUS_TREE, ROAD_STATS],
                json!({ "task": "status", "rows": data.labels.len() }),
            )
        }
    }
}

fn cmd_calibrate(ctx: &Ctx) -> Result<()> {
    let (trajs, net, pois) = ctx.world()?;
    let tree_path = ctx.model(STATUS_TREE);
    let tree: TreeModel = read_json(&tree_path)?;
    let segs = truth_segments(ctx, &trajs)?;
    let stats = pl::build_stats(&segs, &net)?;
    let data = pl::status_data(&segs, &net, &pois, &stats)?;
    let oof = pl::out_of_fold_raw(&data, &ctx.params)?;
    let cal = pl::fit_calibration(&oof, &data.labels)?;
    let classifier = LocalClassifier {
        tree,
        calibration: Some(cal),
    };
    write_json(&ctx.output(CLASSIFIER), &classifier)?;
    let mut w = csv::Writer::from_path(ctx.output(OOF))?;
    let mut row = 0;
    for (seg, &len) in data.seg_lens.iter().enumerate() {
        for _ in 0..len {
            let p = cal.apply(oof[row]);
            w.serialize(OofRow {
                segment: seg,
                label: if data.labels[row] { Label::O } else { Label::N },
                raw: oof[row],
                calibrated: p,
                bin: hsmm::discretize(p, ctx.params.bins),
            })?;
            row += 1;
        }
    }
    w.flush()?;
    let mut inputs = ctx.world_inputs();
    inputs.push(&tree_path);
    ctx.finish(
        "calibrate",
        &inputs,
        &[CLASSIFIER, OOF],
        json!({ "a": cal.a, "b": cal.b }),
    )
}

fn cmd_train_hsmm(ctx: &Ctx) -> Result<()> {
    let path = ctx.model(OOF);
    let mut r = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut seqs: Vec<LabeledSequence> = Vec::new();
    let mut current = None;
    for rec in r.deserialize() {
        let row: OofRow = rec?;
        let state = State::from_label(row.label).context("parked row in out-of-fold scores")?;
        // re-bin so B may differ from the value used at calibration time
        let bin = hsmm::discretize(row.calibrated, ctx.params.bins);
        if current != Some(row.segment) {
            current = Some(row.segment);
            seqs.push(LabeledSequence {
                obs: Vec::new(),
                states: Vec::new(),
            });
        }
        let s = seqs.last_mut().expect("pushed above");
        s.obs.push(bin);
        s.states.push(state);
    }
    let model = hsmm::fit_supervised(&seqs, ctx.params.bins, ctx.params.max_duration)?;
    write_json(&ctx.output(HSMM), &model)?;
    ctx.finish("train-hsmm", &[&path], &[HSMM], json!({ "sequences": seqs.len() }))
}

fn cmd_infer(ctx: &Ctx, history: Option<&PathBuf>) -> Result<()> {
    let (trajs, net, pois) = ctx.world()?;
    let paths = [ctx.model(PARKING_FILTER), ctx.model(ROAD_STATS), ctx.model(CLASSIFIER), ctx.model(HSMM)];
    let filter: TreeModel = read_json(&paths[0])?;
    let stats: RoadStats = read_json(&paths[1])?;
    let classifier: LocalClassifier = read_json(&paths[2])?;
    let hsmm_model: HsmmModel = read_json(&paths[3])?;
    let hsmm_model = if hsmm_model.bins == ctx.params.bins && hsmm_model.max_duration == ctx.params.max_duration {
        hsmm_model
    } else {
        bail!(
            "{} has B={} D={}, config asks for B={} D={}; rerun train-hsmm",
            paths[3].display(),
            hsmm_model.bins,
            hsmm_model.max_duration,
            ctx.params.bins,
            ctx.params.max_duration
        );
    };
    let models = pl::StatusModels {
        stats,
        classifier,
        hsmm: hsmm_model,
    };
    let mut store = load_history(history.or(ctx.history.as_ref()))?;
    let inf = pl::infer(&trajs, &net, &pois, &ctx.params, &filter, &mut store, &models)?;
    write_jsonl(&ctx.output(STATUSES), &inf.statuses)?;
    write_jsonl(&ctx.output(CANDIDATES), candidate_records(&inf.pieces, &inf.candidates))?;
    store.save(&ctx.output(HISTORY))?;
    let mut inputs = ctx.world_inputs();
    inputs.extend(paths.iter().map(PathBuf::as_path));
    inputs.extend(history.map(PathBuf::as_path));
    let labelled = inf.pieces.iter().all(|p| p.points.iter().all(|x| x.label.is_some()));
    let extra = if labelled {
        let cm = harness::status_confusion(&inf.statuses, &inf.pieces)?;
        json!({ "accuracy": cm.accuracy(), "confusion": cm.counts })
    } else {
        json!({})
    };
    ctx.finish("infer", &inputs, &[STATUSES, CANDIDATES, HISTORY], extra)
}

fn split_test(trajs: Vec<Trajectory>, test_taxis: usize) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    let mut ids: Vec<String> = trajs.iter().map(|t| t.taxi_id.clone()).collect();
    ids.sort();
    ids.dedup();
    if test_taxis == 0 || test_taxis >= ids.len() {
        bail!(taxistat_core::Error::TooFewTaxis {
            taxis: ids.len(),
            folds: test_taxis + 1,
        });
    }
    let cut = ids[ids.len() - test_taxis].clone();
    Ok(trajs.into_iter().partition(|t| t.taxi_id < cut))
}

fn cmd_eval(ctx: &Ctx, test_taxis: usize, sizes: Vec<usize>, sweep: Vec<usize>) -> Result<()> {
    let (trajs, net, pois) = ctx.world()?;
    let params = &ctx.params;
    let (train, test) = split_test(trajs, test_taxis)?;
    let n_train = train.iter().map(|t| &t.taxi_id).collect::<std::collections::BTreeSet<_>>().len();
    let opts = ComparisonOptions {
        train_sizes: if sizes.is_empty() { vec![n_train] } else { sizes },
        sweep,
    };
    let comparison = harness::run_comparison(&train, &test, &net, &pois, params, &opts)?;

    let train_pieces = pl::split_pieces(&train, params.max_gap_s);
    let (scored, _) = pl::parking_truth_pass(&train_pieces, &net, &pois, params)?;
    let parking = harness::parking_cv(&train_pieces, &scored, params)?;

    // full pipeline on the held-out taxis
    let filter = harness::fit_parking_filter(&scored, params)?;
    let segs = pl::truth_segments(&train_pieces)?;
    let trained = pl::train_status_models(&segs, &net, &pois, params)?;
    let mut store = HistoryStore::new();
    let inf = pl::infer(&test, &net, &pois, params, &filter, &mut store, &trained.models)?;
    let cm = harness::status_confusion(&inf.statuses, &inf.pieces)?;
    let three_class = json!({
        "classes": ["N", "O", "P"],
        "counts": cm.counts,
        "accuracy": cm.accuracy(),
        "recall": [cm.recall(Label::N), cm.recall(Label::O), cm.recall(Label::P)],
        "precision": [cm.precision(Label::N), cm.precision(Label::O), cm.precision(Label::P)],
        "macro_f1": cm.macro_f1(),
    });
    write_json(
        &ctx.output("eval_report.json"),
        &json!({ "comparison": comparison, "parking": parking, "three_class": three_class }),
    )?;

    let mut w = csv::Writer::from_path(ctx.output("accuracy_vs_size.csv"))?;
    w.write_record(["train_taxis", "dt", "dt_hmm", "dt_hsmm"])?;
    for r in &comparison.by_size {
        w.serialize((r.train_taxis, r.dt, r.dt_hmm, r.dt_hsmm))?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(ctx.output("accuracy_vs_d.csv"))?;
    w.write_record(["d", "accuracy"])?;
    for r in &comparison.sweep {
        w.serialize((r.d, r.accuracy))?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(ctx.output("parking_ablation.csv"))?;
    w.write_record(["features", "f1", "accuracy", "precision", "recall"])?;
    for r in &parking.ablations {
        w.serialize((&r.name, r.f1, r.accuracy, r.precision, r.recall))?;
    }
    w.flush()?;
    ctx.finish(
        "eval",
        &ctx.world_inputs(),
        &["eval_report.json", "accuracy_vs_size.csv", "accuracy_vs_d.csv", "parking_ablation.csv"],
        json!({ "test_taxis": test_taxis, "options": opts }),
    )
}

fn cmd_mi(ctx: &Ctx, task: Task, bins: usize) -> Result<()> {
    let (trajs, net, pois) = ctx.world()?;
    let (table, labels, name) = match task {
        Task::Parking => {
            let pieces = pl::split_pieces(&trajs, ctx.params.max_gap_s);
            let (scored, _) = pl::parking_truth_pass(&pieces, &net, &pois, &ctx.params)?;
            let feats: Vec<_> = scored.iter().map(|(_, s)| s.features).collect();
            let labels = scored.iter().map(|(_, s)| s.candidate.is_true_park()).collect();
            (parking_table(&feats), labels, "mi_parking.csv")
        }
        Task::Status => {
            let segs = truth_segments(ctx, &trajs)?;
            let stats = pl::build_stats(&segs, &net)?;
            let data = pl::status_data(&segs, &net, &pois, &stats)?;
            (data.table, data.labels, "mi_status.csv")
        }
    };
    let ranked = harness::rank_features(&table, &labels, bins)?;
    let mut w = csv::Writer::from_path(ctx.output(name))?;
    w.write_record(["feature", "mi_bits"])?;
    for f in &ranked {
        w.serialize((&f.feature, f.mi_bits))?;
    }
    w.flush()?;
    ctx.finish("mi", &ctx.world_inputs(), &[name], json!({ "mi_bins": bins }))
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.global)?;
    if let Some(n) = cli.global.workers {
        if n == 0 {
            bail!(taxistat_core::Error::Invalid("workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    std::fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    match cli.command {
        Command::Gen { taxis, days, blocks } => cmd_gen(&ctx, taxis, days, blocks),
        Command::Parking { model, history } => cmd_parking(&ctx, model.as_ref(), history.as_ref()),
        Command::Features => cmd_features(&ctx),
        Command::TrainTree { task } => cmd_train_tree(&ctx, task),
        Command::Calibrate => cmd_calibrate(&ctx),
        Command::TrainHsmm => cmd_train_hsmm(&ctx),
        Command::Infer { history } => cmd_infer(&ctx, history.as_ref()),
        Command::Eval { test_taxis, sizes, sweep } => cmd_eval(&ctx, test_taxis, sizes, sweep),
        Command::Mi { task, mi_bins } => cmd_mi(&ctx, task, mi_bins),
    }
}

/// 2 for filesystem failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>().is_some()
            || e.downcast_ref::<taxistat_core::Error>().is_some_and(|e| e.is_io())
            || e.downcast_ref::<csv::Error>().is_some_and(|e| e.is_io_error())
    });
    if io {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

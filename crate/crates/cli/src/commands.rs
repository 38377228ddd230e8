//! One function per experiment command. Each is a thin deterministic wrapper
//! over the library and writes its artifacts plus a JSON report.

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tangent_core::compose::{
    self, delta_norm_change, make_shards, shard_seed, train_shard, unlearn_retrain, unlearn_subtract, ComposedModel,
    Shard, ShardModel,
};
use tangent_core::data::SynthTask;
use tangent_core::io::{
    ids_digest, load_base, load_composed, load_dataset, load_delta, load_shard, save_base, save_composed,
    save_dataset, save_delta, save_shard, LIBRARY_VERSION,
};
use tangent_core::model::init_tangent;
use tangent_core::oracle::run_oracle_suite;
use tangent_core::privacy::{account, sigma_for_epsilon, train_private, train_private_nonlinear, PrivacyBudget};
use tangent_core::training::{evaluate_nonlinear, evaluate_tangent, train_nonlinear, LossKind, OptimizerKind};
use tangent_core::{
    BaseWeights, Dataset, ModelConfig, PredictionMode, RngState, TangentModel, TangentWeights, Tensor, TrainConfig,
    TrainReport,
};

use crate::error::{CliError, CliResult};
use crate::spec::*;

pub const REPORT_VERSION: u32 = 1;

/// Runs one experiment and returns the text for stdout.
pub fn execute(spec: ExperimentSpec) -> CliResult<String> {
    match spec {
        ExperimentSpec::GenData(a) => gen_data(a),
        ExperimentSpec::Pretrain(a) => pretrain(a),
        ExperimentSpec::Init(a) => init(a),
        ExperimentSpec::Shard(a) => shard(a),
        ExperimentSpec::Train(a) => train(a),
        ExperimentSpec::Compose(a) => compose_cmd(a),
        ExperimentSpec::Unlearn(a) => unlearn(a),
        ExperimentSpec::TrainDp(a) => train_dp(a),
        ExperimentSpec::Eval(a) => eval(a),
        ExperimentSpec::OracleCheck(a) => oracle_check(a),
        ExperimentSpec::DpSigma(a) => dp_sigma(a),
    }
}

fn out_dir(dir: &mut Option<PathBuf>) -> CliResult<PathBuf> {
    let dir = resolve_out(dir);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

/// Writes `{dir}/{name}.report.json` with the spec and library version.
fn write_report(dir: &Path, name: &str, spec: ExperimentSpec, result: Value) -> CliResult<PathBuf> {
    let report = json!({
        "report_version": REPORT_VERSION,
        "library_version": LIBRARY_VERSION,
        "spec": to_value(&spec),
        "result": result,
    });
    let path = dir.join(format!("{name}.report.json"));
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_text(&path, &text)?;
    Ok(path)
}

/// Writes `{dir}/{name}.train.jsonl`: one line per epoch, then the summary.
fn write_log(dir: &Path, name: &str, report: &TrainReport) -> CliResult<()> {
    write_text(&dir.join(format!("{name}.train.jsonl")), &report.to_json_lines()?)
}

fn set_workers(workers: Option<usize>) -> CliResult<()> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        // A second request in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn train_config(path: &Option<PathBuf>, default: TrainConfig) -> CliResult<TrainConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => default,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> CliResult<TangentModel> {
    Ok(load_base(path)?.0)
}

fn data(path: &Path) -> CliResult<Dataset> {
    Ok(load_dataset(path)?.0)
}

fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn summary(report: &TrainReport) -> String {
    let mut s = format!(
        "epochs={} steps={} train_accuracy={:.4} train_loss={:.6} delta_norm={:.6}",
        report.epochs.len(),
        report.steps,
        report.final_train_accuracy,
        report.final_train_loss,
        report.final_delta_norm
    );
    if let Some(p) = &report.privacy {
        s.push_str(&format!(" epsilon={:.4}", p.epsilon_spent));
    }
    s
}

fn gen_data(mut a: GenDataArgs) -> CliResult<String> {
    let dir = out_dir(&mut a.out_dir)?;
    let t = &a.task;
    let task = SynthTask::new(tangent_core::data::SynthSpec {
        n_classes: t.n_classes,
        n_features: t.n_features,
        n_tokens: t.n_tokens,
        separation: t.separation,
        noise: t.noise,
        task_seed: t.task_seed,
        source_seed: t.source_seed,
        similarity: t.similarity,
    })?;
    let d = task.sample(a.n, a.seed, a.first_id)?;
    let path = dir.join(format!("{}.tgd", a.name));
    save_dataset(&path, &d, json!({ "synthetic": to_value(task.spec()), "seed": a.seed }))?;
    let name = a.name.clone();
    write_report(&dir, &name, ExperimentSpec::GenData(a), json!({ "n_samples": d.len(), "dataset": path }))?;
    Ok(format!("wrote {} ({} samples)\n", path.display(), d.len()))
}

fn pretrain(mut a: PretrainArgs) -> CliResult<String> {
    set_workers(a.workers)?;
    let dir = out_dir(&mut a.out_dir)?;
    let d = data(&a.data)?;
    let shape = ModelConfig {
        n_classes: d.n_classes,
        n_features: d.n_features,
        n_tokens: d.n_tokens,
        ..ModelConfig::default()
    };
    // Keys present in the file override the dataset-derived defaults.
    let mut cfg: ModelConfig = match &a.model_config {
        Some(p) => {
            let mut merged = to_value(&shape);
            let Value::Object(given) = read_json::<Value>(p)? else {
                return Err(CliError::Config(format!("{}: expected a JSON object", p.display())));
            };
            merged.as_object_mut().expect("struct serializes to an object").extend(given);
            serde_json::from_value(merged).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => shape,
    };
    // Pretraining tunes every block of the ordinary network.
    cfg.tunable_blocks = cfg.depth;
    cfg.reset_last_block = false;
    cfg.linearize_cls = false;
    cfg.prediction_mode = PredictionMode::Full;
    cfg.validate()?;
    let tc = train_config(
        &a.train_config,
        TrainConfig {
            loss: LossKind::Ce,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            epochs: 20,
            batch_size: 32,
            seed: a.seed,
            ..TrainConfig::default()
        },
    )?;
    let init = BaseWeights::random(&cfg, &mut RngState::new(a.seed).derive("pretrain-init"))?;
    let m0 = TangentModel::new(cfg.clone(), init)?;
    let (delta, report) = train_nonlinear(&m0, &d, &tc)?;
    let m = TangentModel::new(cfg.clone(), m0.base().apply_delta(&cfg, &delta)?)?;
    let path = dir.join("pretrained.tgt");
    save_base(&path, &m, to_value(&ExperimentSpec::Pretrain(a.clone())))?;
    let line = summary(&report);
    write_log(&dir, "pretrain", &report)?;
    write_report(
        &dir,
        "pretrain",
        ExperimentSpec::Pretrain(a),
        json!({ "model_config": cfg, "fingerprint": m.fingerprint(), "train": report }),
    )?;
    Ok(format!("{line}\nwrote {}\n", path.display()))
}

fn init(mut a: InitArgs) -> CliResult<String> {
    let dir = out_dir(&mut a.out_dir)?;
    let pre = load_model(&a.pretrained)?;
    let cfg = ModelConfig {
        tunable_blocks: a.tunable_blocks,
        reset_last_block: a.reset_last_block,
        linearize_cls: a.linearize_cls,
        prediction_mode: if a.jvp_only { PredictionMode::JvpOnly } else { PredictionMode::Full },
        tunable_subset: a.subset.into(),
        ..pre.config().clone()
    };
    let (base, _) = init_tangent(pre.base(), &cfg, &RngState::new(a.seed))?;
    let m = TangentModel::new(cfg.clone(), base)?;
    let path = dir.join(format!("{}.tgt", a.name));
    save_base(&path, &m, to_value(&ExperimentSpec::Init(a.clone())))?;
    let name = a.name.clone();
    write_report(
        &dir,
        &name,
        ExperimentSpec::Init(a),
        json!({ "model_config": cfg, "fingerprint": m.fingerprint(), "pretrained_fingerprint": pre.fingerprint() }),
    )?;
    Ok(format!("fingerprint {}\nwrote {}\n", m.fingerprint(), path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    shard_id: String,
    n_samples: usize,
    ids_digest: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    library_version: String,
    dataset_digest: String,
    seed: u64,
    n_shards: usize,
    shards: Vec<ManifestEntry>,
}

fn shard(mut a: ShardArgs) -> CliResult<String> {
    let dir = out_dir(&mut a.out_dir)?;
    let d = data(&a.data)?;
    let shards = make_shards(&d, a.n_shards, a.seed)?;
    let mut entries = Vec::new();
    for s in &shards {
        let file = format!("{}.ids.json", s.shard_id);
        let mut text = serde_json::to_string_pretty(s).expect("shard serializes");
        text.push('\n');
        write_text(&dir.join(&file), &text)?;
        entries.push(ManifestEntry {
            shard_id: s.shard_id.clone(),
            n_samples: s.sample_ids.len(),
            ids_digest: ids_digest(&s.sample_ids),
            file,
        });
    }
    let manifest = Manifest {
        format_version: 1,
        library_version: LIBRARY_VERSION.into(),
        dataset_digest: file_digest(&a.data)?,
        seed: a.seed,
        n_shards: a.n_shards,
        shards: entries,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_text(&path, &text)?;
    let sizes: Vec<usize> = manifest.shards.iter().map(|e| e.n_samples).collect();
    write_report(&dir, "shard", ExperimentSpec::Shard(a), json!({ "manifest": path, "sizes": sizes }))?;
    Ok(format!("wrote {} ({} shards)\n", path.display(), shards.len()))
}

fn read_shard(manifest_path: &Path, shard_id: &str) -> CliResult<Shard> {
    let manifest: Manifest = read_json(manifest_path)?;
    let entry = manifest
        .shards
        .iter()
        .find(|e| e.shard_id == shard_id)
        .ok_or_else(|| CliError::Data(format!("{}: no shard {shard_id}", manifest_path.display())))?;
    let file = manifest_path.parent().unwrap_or(Path::new(".")).join(&entry.file);
    let text = fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
    let s: Shard = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
    if s.shard_id != shard_id || ids_digest(&s.sample_ids) != entry.ids_digest {
        return Err(CliError::Data(format!("{}: ids do not match the manifest digest", file.display())));
    }
    Ok(s)
}

/// Nonlinear fine-tuning of one shard with the same seed policy as
/// [`train_shard`].
fn train_shard_nonlinear(m: &TangentModel, d: &Dataset, s: &Shard, tc: &TrainConfig) -> CliResult<(ShardModel, TrainReport)> {
    let sub = d.subset(&s.sample_ids)?;
    let cfg = TrainConfig {
        seed: shard_seed(tc.seed, &s.shard_id),
        ..tc.clone()
    };
    let (delta, report) = train_nonlinear(m, &sub, &cfg)?;
    let sm = ShardModel {
        shard_id: s.shard_id.clone(),
        delta,
        base_fingerprint: m.fingerprint().into(),
        sample_ids: s.sample_ids.clone(),
        train_config_digest: cfg.digest(),
    };
    Ok((sm, report))
}

fn train(mut a: TrainArgs) -> CliResult<String> {
    set_workers(a.workers)?;
    let dir = out_dir(&mut a.out_dir)?;
    let m = load_model(&a.base)?;
    let d = data(&a.data)?;
    let tc = train_config(&a.train_config, TrainConfig::default())?;
    let path = dir.join(format!("{}.tgt", a.name));
    let report = match (&a.manifest, &a.shard) {
        (Some(manifest), Some(id)) => {
            let s = read_shard(manifest, id)?;
            let (sm, report) = if a.nonlinear {
                train_shard_nonlinear(&m, &d, &s, &tc)?
            } else {
                train_shard(&m, &d, &s, &tc)?
            };
            save_shard(&path, &m, &sm)?;
            report
        }
        _ => {
            let (delta, report) = if a.nonlinear {
                train_nonlinear(&m, &d, &tc)?
            } else {
                tangent_core::training::train_tangent(&m, &d, &tc)?
            };
            save_delta(&path, &m, &delta, to_value(&ExperimentSpec::Train(a.clone())))?;
            report
        }
    };
    let line = summary(&report);
    let name = a.name.clone();
    write_log(&dir, &name, &report)?;
    write_report(&dir, &name, ExperimentSpec::Train(a), json!({ "artifact": path, "train": report }))?;
    Ok(format!("{line}\nwrote {}\n", path.display()))
}

fn composed_result(cm: &ComposedModel, path: &Path) -> Value {
    json!({
        "artifact": path,
        "components": cm.components(),
        "delta_norm": tangent_core::ParamVector::norm(&cm.delta),
        "base_fingerprint": cm.base_fingerprint,
    })
}

fn compose_cmd(mut a: ComposeArgs) -> CliResult<String> {
    let dir = out_dir(&mut a.out_dir)?;
    let m = load_model(&a.base)?;
    let members = a.shards.iter().map(|p| load_shard(p, &m)).collect::<tangent_core::Result<Vec<_>>>()?;
    let cm = compose::compose(&members, a.lambdas.as_deref())?;
    let path = dir.join(format!("{}.tgt", a.name));
    save_composed(&path, &m, &cm)?;
    let name = a.name.clone();
    let result = composed_result(&cm, &path);
    write_report(&dir, &name, ExperimentSpec::Compose(a), result)?;
    Ok(format!("composed {} shard models\nwrote {}\n", cm.len(), path.display()))
}

fn unlearn(mut a: UnlearnArgs) -> CliResult<String> {
    set_workers(a.workers)?;
    let dir = out_dir(&mut a.out_dir)?;
    let m = load_model(&a.base)?;
    let cm = load_composed(&a.composed, &m)?;
    let steps = Cell::new(0usize);
    let mut resolved = None;
    let after = if a.subtract {
        if !a.forget.is_empty() {
            return Err(CliError::Config("--forget applies to --retrain only".into()));
        }
        unlearn_subtract(&cm, &a.shard_id, a.renormalization.into())?
    } else {
        let data_path = a
            .data
            .as_ref()
            .ok_or_else(|| CliError::Config("--retrain needs --data".into()))?;
        let d = data(data_path)?;
        let tc = train_config(&a.train_config, TrainConfig::default())?;
        let member = cm
            .members
            .iter()
            .find(|s| s.shard_id == a.shard_id)
            .ok_or_else(|| CliError::Config(format!("shard {} is not a component", a.shard_id)))?;
        let expected = TrainConfig {
            seed: shard_seed(tc.seed, &a.shard_id),
            ..tc.clone()
        }
        .digest();
        if expected != member.train_config_digest {
            return Err(CliError::Config(format!(
                "training config differs from the one shard {} was trained with",
                a.shard_id
            )));
        }
        let out = unlearn_retrain(&cm, &a.shard_id, &a.forget, |s| {
            let (sm, report) = train_shard(&m, &d, s, &tc)?;
            steps.set(steps.get() + report.steps);
            Ok(sm)
        })?;
        resolved = Some(tc);
        out
    };
    let path = dir.join(format!("{}.tgt", a.name));
    save_composed(&path, &m, &after)?;
    let mut result = composed_result(&after, &path);
    result["training_steps"] = json!(steps.get());
    result["delta_norm_change"] = json!(delta_norm_change(&cm, &after)?);
    result["train_config"] = json!(resolved);
    let name = a.name.clone();
    write_report(&dir, &name, ExperimentSpec::Unlearn(a), result)?;
    Ok(format!(
        "{} components remain, training_steps={}\nwrote {}\n",
        after.len(),
        steps.get(),
        path.display()
    ))
}

fn train_dp(mut a: TrainDpArgs) -> CliResult<String> {
    set_workers(a.workers)?;
    let dir = out_dir(&mut a.out_dir)?;
    let m = load_model(&a.base)?;
    let d = data(&a.data)?;
    let tc = train_config(
        &a.train_config,
        TrainConfig {
            loss: LossKind::Ce,
            ..TrainConfig::default()
        },
    )?;
    let budget = PrivacyBudget {
        epsilon: a.epsilon,
        delta: a.delta,
        clip_norm: a.clip_norm,
        noise_multiplier: a.noise_multiplier,
    };
    let (delta, report) = if a.nonlinear {
        train_private_nonlinear(&m, &d, &tc, &budget)?
    } else {
        train_private(&m, &d, &tc, &budget)?
    };
    let path = dir.join(format!("{}.tgt", a.name));
    save_delta(&path, &m, &delta, to_value(&ExperimentSpec::TrainDp(a.clone())))?;
    let line = summary(&report);
    let name = a.name.clone();
    write_log(&dir, &name, &report)?;
    write_report(&dir, &name, ExperimentSpec::TrainDp(a), json!({ "artifact": path, "train": report }))?;
    Ok(format!("{line}\nwrote {}\n", path.display()))
}

/// Largest relative deviation between the composed prediction and the
/// output ensemble of its members over `data`.
fn ensemble_residual(m: &TangentModel, cm: &ComposedModel, data: &Dataset) -> CliResult<f64> {
    let total: f64 = cm.lambdas.iter().sum();
    let mut worst: f64 = 0.0;
    for s in &data.samples {
        let composed = m.predict(&m.forward_dual(&cm.delta, &s.x)?);
        let mut ensemble = Tensor::zeros(composed.shape());
        for (member, l) in cm.members.iter().zip(&cm.lambdas) {
            ensemble.axpy(*l, &m.predict(&m.forward_dual(&member.delta, &s.x)?))?;
        }
        if m.config().prediction_mode == PredictionMode::Full {
            ensemble.axpy(1.0 - total, &m.forward_value(&s.x)?)?;
        }
        let diff = composed.sub(&ensemble)?.max_abs();
        worst = worst.max(diff / ensemble.max_abs().max(1e-8));
    }
    Ok(worst)
}

#[derive(Serialize)]
struct Prediction {
    id: u64,
    label: usize,
    prediction: Vec<f64>,
}

fn write_predictions(path: &Path, m: &TangentModel, delta: &TangentWeights, d: &Dataset, nonlinear: bool) -> CliResult<()> {
    let shifted;
    let (model, delta) = if nonlinear {
        let cfg = ModelConfig {
            prediction_mode: PredictionMode::Full,
            ..m.config().clone()
        };
        shifted = TangentModel::new(cfg.clone(), m.base().apply_delta(&cfg, delta)?)?;
        (&shifted, shifted.zero_delta())
    } else {
        (m, delta.clone())
    };
    let rows = d
        .samples
        .iter()
        .map(|s| {
            let p = model.predict(&model.forward_dual(&delta, &s.x)?);
            Ok(Prediction {
                id: s.id,
                label: s.label,
                prediction: p.into_data(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut text = serde_json::to_string(&rows).expect("predictions serialize");
    text.push('\n');
    write_text(path, &text)
}

fn eval(mut a: EvalArgs) -> CliResult<String> {
    let dir = out_dir(&mut a.out_dir)?;
    let m = load_model(&a.base)?;
    let d = data(&a.data)?;
    let loss = train_config(&a.train_config, TrainConfig::default())?.loss_spec();
    let mut residual = None;
    let delta: TangentWeights = if let Some(p) = &a.delta {
        load_delta(p, &m)?.0
    } else if let Some(p) = &a.shard {
        load_shard(p, &m)?.delta
    } else if let Some(p) = &a.composed {
        let cm = load_composed(p, &m)?;
        if !a.nonlinear {
            residual = Some(ensemble_residual(&m, &cm, &d)?);
        }
        cm.delta
    } else {
        m.zero_delta()
    };
    let r = if a.nonlinear {
        evaluate_nonlinear(&m, &delta, &d, loss)?
    } else {
        evaluate_tangent(&m, &delta, &d, loss)?
    };
    if a.predictions {
        write_predictions(&dir.join(format!("{}.predictions.json", a.name)), &m, &delta, &d, a.nonlinear)?;
    }
    let mut line = format!("n={} accuracy={:.4} loss={:.6}", r.n, r.accuracy, r.loss);
    if let Some(res) = residual {
        line.push_str(&format!(" ensemble_residual={res:.3e}"));
    }
    let name = a.name.clone();
    write_report(
        &dir,
        &name,
        ExperimentSpec::Eval(a),
        json!({ "n": r.n, "accuracy": r.accuracy, "loss": r.loss, "ensemble_residual": residual }),
    )?;
    Ok(line + "\n")
}

fn oracle_check(a: OracleArgs) -> CliResult<String> {
    let report = run_oracle_suite(a.seed, a.instances, a.inject_fault.map(Into::into))?;
    let text = if a.json {
        let mut t = serde_json::to_string_pretty(&report).expect("report serializes");
        t.push('\n');
        t
    } else {
        report.render()
    };
    if report.passed {
        Ok(text)
    } else {
        let failed = report
            .failures()
            .iter()
            .map(|c| format!("{} (shape {}, max_rel_error {:.3e} > {:.0e})", c.name, c.worst_shape, c.max_rel_error, c.tolerance))
            .collect::<Vec<_>>()
            .join(", ");
        Err(CliError::Oracle { report: text, failed })
    }
}

fn dp_sigma(a: DpSigmaArgs) -> CliResult<String> {
    let sigma = sigma_for_epsilon(a.epsilon, a.delta, a.steps, a.sample_rate)?;
    let eps = account(sigma, a.steps, a.sample_rate, a.delta)?;
    let out = json!({
        "noise_multiplier": sigma,
        "epsilon": eps,
        "delta": a.delta,
        "steps": a.steps,
        "sample_rate": a.sample_rate,
    });
    Ok(serde_json::to_string_pretty(&out).expect("serializes") + "\n")
}

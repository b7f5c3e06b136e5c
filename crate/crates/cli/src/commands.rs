use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqinsert::bpr::{bpr_train, BprLocalizer, BprModel};
use seqinsert::checkpoint::{load_checkpoint, Checkpoint};
use seqinsert::config::{hex, RunConfig};
use seqinsert::dataset::{write_synthetic_dataset, DatasetDir, Split};
use seqinsert::evaluation::{
    aggregate, compare_results, evaluate_pairs, export_attention, load_results, partner_pairs, save_results,
    InsertionLocalizer, LocalizationResult, SliceLocalizer,
};
use seqinsert::model::predict_insertion;
use seqinsert::training::{build_model, train};
use seqinsert::volume::load_volume;
use seqinsert::{Error, Result};

use crate::{Command, ConfigArgs, EvalArgs};

pub(crate) fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, cfg } => synth(&out, &cfg),
        Command::Train { data, out, cfg } => train_cmd(&data, &out, &cfg, Model::Insertion),
        Command::BprTrain { data, out, cfg } => train_cmd(&data, &out, &cfg, Model::Bpr),
        Command::Eval(args) => eval(&args, Model::Insertion),
        Command::BprEval(args) => eval(&args, Model::Bpr),
        Command::Insert { query, target, ckpt, out } => insert(&query, &target, &ckpt, out.as_deref()),
        Command::ExportAttn { query, target, ckpt, csv, pgm } => {
            let (cfg, ck) = checkpoint_config(&ckpt, &ConfigArgs::default(), None)?;
            let model = build_model(&cfg)?;
            ck.check_params(&model.init_params(&mut shape_rng()))?;
            let pred = predict_insertion(&load_volume(&query)?, &load_volume(&target)?, &model, &ck.params, cfg.train.max_slices)?;
            export_attention(&pred.map, &csv, &pgm)
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Model {
    Insertion,
    Bpr,
}

/// Generator for initializers that only serve to learn parameter shapes.
fn shape_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn read_config(args: &ConfigArgs, seed_key: Option<&str>) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    RunConfig::load(text.as_deref(), &overrides(args, seed_key))
}

fn overrides(args: &ConfigArgs, seed_key: Option<&str>) -> Vec<String> {
    let mut o = args.set.clone();
    if let (Some(seed), Some(key)) = (args.seed, seed_key) {
        o.push(format!("{key}={seed}"));
    }
    o
}

/// The run config stored in a checkpoint, with evaluation-time overrides.
fn checkpoint_config(path: &Path, args: &ConfigArgs, seed_key: Option<&str>) -> Result<(RunConfig, Checkpoint)> {
    if args.config.is_some() {
        return Err(Error::Config("--config cannot be combined with --ckpt; the checkpoint carries its config".into()));
    }
    let ck = load_checkpoint(path)?;
    let stored = RunConfig::from_json(&ck.config_json)?;
    if stored.fingerprint() != ck.fingerprint {
        return Err(Error::Malformed(format!(
            "{}: config fingerprint {} does not match stored {}",
            path.display(),
            hex(&stored.fingerprint()),
            hex(&ck.fingerprint)
        )));
    }
    let cfg = RunConfig::load(Some(&ck.config_json), &overrides(args, seed_key))?;
    Ok((cfg, ck))
}

fn synth(out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = read_config(args, Some("synth.seed"))?;
    let keys = cfg.supervision.key_set()?;
    let manifest = write_synthetic_dataset(out, &cfg.synth, &keys)?;
    log::info!("wrote {} volumes to {}", manifest.volumes.len(), out.display());
    Ok(())
}

fn train_cmd(data: &Path, out: &Path, args: &ConfigArgs, which: Model) -> Result<()> {
    let seed_key = match which {
        Model::Insertion => "train.seed",
        Model::Bpr => "bpr.seed",
    };
    let cfg = read_config(args, Some(seed_key))?;
    let keys = cfg.supervision.key_set()?;
    let ds = DatasetDir::open(data, &keys)?;
    let (tr, va) = (ds.load(Split::Train)?, ds.load(Split::Val)?);
    let outcome = match which {
        Model::Insertion => train(&tr, &va, &cfg, Some(out))?,
        Model::Bpr => bpr_train(&tr, &va, &cfg, Some(out))?,
    };
    println!(
        "best epoch {} val_error_mm {:.4}",
        outcome.best.epoch, outcome.best.val_metric
    );
    Ok(())
}

fn eval(args: &EvalArgs, which: Model) -> Result<()> {
    if !args.results.is_empty() {
        return compare(&args.results, &args.cfg);
    }
    let (Some(data), Some(ckpt)) = (&args.data, &args.ckpt) else {
        return Err(Error::Config("eval needs --data and --ckpt, or --results".into()));
    };
    let (cfg, ck) = checkpoint_config(ckpt, &args.cfg, Some("eval.seed"))?;
    let keys = cfg.supervision.key_set()?;
    let test = DatasetDir::open(data, &keys)?.load(Split::Test)?;
    let pairs = partner_pairs(test.len(), cfg.eval.partners, cfg.eval.seed);
    let mut rng = shape_rng();
    let results = match which {
        Model::Insertion => {
            let model = build_model(&cfg)?;
            ck.check_params(&model.init_params(&mut rng))?;
            let loc = InsertionLocalizer {
                model: &model,
                params: &ck.params,
                max_slices: cfg.train.max_slices,
            };
            evaluate_pairs(&loc as &dyn SliceLocalizer, &test, &pairs, &keys)?
        }
        Model::Bpr => {
            let model = BprModel::new(&cfg)?;
            ck.check_params(&model.init_params(&mut rng))?;
            let loc = BprLocalizer {
                model: &model,
                params: &ck.params,
                max_slices: cfg.train.max_slices,
            };
            evaluate_pairs(&loc as &dyn SliceLocalizer, &test, &pairs, &keys)?
        }
    };
    if let Some(out) = &args.out {
        save_results(out, &results)?;
    }
    print!("{}", aggregate(&results, &keys, cfg.eval.min_cases).to_table());
    Ok(())
}

fn compare(paths: &[PathBuf], args: &ConfigArgs) -> Result<()> {
    if paths.len() > 2 {
        return Err(Error::Config("at most two --results files can be compared".into()));
    }
    let cfg = read_config(args, None)?;
    let keys = cfg.supervision.key_set()?;
    let sets: Vec<Vec<LocalizationResult>> = paths.iter().map(|p| load_results(p)).collect::<Result<_>>()?;
    for (p, r) in paths.iter().zip(&sets) {
        println!("# {}", p.display());
        print!("{}", aggregate(r, &keys, cfg.eval.min_cases).to_table());
    }
    if let [a, b] = sets.as_slice() {
        let w = compare_results(a, b)?;
        println!(
            "wilcoxon n={} statistic={} method={:?} p={:.6e}",
            w.n, w.statistic, w.method, w.p_value
        );
    }
    Ok(())
}

fn insert(query: &Path, target: &Path, ckpt: &Path, out: Option<&Path>) -> Result<()> {
    let (cfg, ck) = checkpoint_config(ckpt, &ConfigArgs::default(), None)?;
    let model = build_model(&cfg)?;
    ck.check_params(&model.init_params(&mut shape_rng()))?;
    let pred = predict_insertion(&load_volume(query)?, &load_volume(target)?, &model, &ck.params, cfg.train.max_slices)?;
    let mut text = String::from("query_index,position\n");
    for (i, p) in pred.map.query_index_map.iter().zip(&pred.positions) {
        text.push_str(&format!("{i},{p}\n"));
    }
    match out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

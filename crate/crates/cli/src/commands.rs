use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};

use dtvit_core::checkpoint::{load_checkpoint, load_pretrained, read_manifest, save_checkpoint, HeadPolicy};
use dtvit_core::datapipe::{self, balance, eval_transform, DatasetIndex, IndexRecord, Split};
use dtvit_core::metrics::{self, EvalScope, Report};
use dtvit_core::morph::{preprocess as morph_preprocess, Window};
use dtvit_core::params::{manifest_numel, ShapeManifest};
use dtvit_core::phantom::{generate_dataset, PhantomClass};
use dtvit_core::raster::Raster;
use dtvit_core::train::{evaluate, history_tsv, train as fit, Evaluation};
use dtvit_core::{count_params, Dtvit, DtvitConfig, HeadSpec};

use crate::data::{load_image, load_samples, read_index, INDEX_FILE};
use crate::{
    Classify, ConfigArgs, EvalArgs, Failure, InspectArgs, PredictArgs, Preset, PreprocessArgs, RunConfig, SplitChoice,
    SynthArgs, TrainArgs,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.dtv";
pub const LAST_FILE: &str = "last.dtv";
pub const HISTORY_FILE: &str = "history.tsv";
pub const SPLITS_FILE: &str = "splits.tsv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

type CmdResult = Result<(), Failure>;

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(args.preset, args.config.as_deref()).config_err()?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Config for a saved model: an explicit file, else `config.toml` beside
/// the checkpoint, else the preset whose architecture matches.
fn config_for_checkpoint(explicit: Option<&Path>, checkpoint: &Path, model: &DtvitConfig) -> Result<RunConfig, Failure> {
    let sibling = checkpoint.parent().map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    let cfg = match explicit.map(Path::to_path_buf).or(sibling) {
        Some(path) => RunConfig::load(None, Some(&path)).config_err()?,
        None => {
            let preset = [Preset::Tiny, Preset::Large]
                .into_iter()
                .find(|p| p.model() == *model)
                .ok_or_else(|| Failure::Config(anyhow!("checkpoint matches no preset; pass --config")))?;
            RunConfig::preset(preset)
        }
    };
    if cfg.model() != *model {
        return Err(Failure::Config(anyhow!(
            "checkpoint architecture does not match the `{}` preset in the configuration",
            cfg.preset_name()
        )));
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .data_err()
}

pub fn synth(a: SynthArgs) -> CmdResult {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(counts) = a.counts {
        cfg.data.counts = counts
            .try_into()
            .map_err(|c: Vec<usize>| Failure::Config(anyhow!("--counts needs 4 values, got {}", c.len())))?;
    }
    if let Some(size) = a.size {
        cfg.phantom.size = size;
    }
    if let Some(n) = a.slices_per_patient {
        cfg.data.slices_per_patient = n;
    }
    cfg.phantom.validate().config_err()?;
    let index = generate_dataset(cfg.data.counts, &cfg.phantom, cfg.seed, cfg.data.slices_per_patient, &a.out).data_err()?;
    for (class, n) in PhantomClass::ALL.iter().zip(cfg.data.counts) {
        println!("{class}\t{n}");
    }
    println!("wrote {} images and {INDEX_FILE} to {}", index.len(), a.out.display());
    Ok(())
}

pub fn preprocess(a: PreprocessArgs) -> CmdResult {
    let mut cfg = load_config(&a.cfg)?;
    let m = &mut cfg.morph;
    if a.threshold.is_some() {
        m.threshold = a.threshold;
    }
    m.erosion_radius = a.erosion_radius.unwrap_or(m.erosion_radius);
    m.edge_columns = a.edge_columns.unwrap_or(m.edge_columns);
    m.fill_connectivity = a.connectivity.unwrap_or(m.fill_connectivity);
    if let (Some(center), Some(width)) = (a.window_center, a.window_width) {
        m.window = Some(Window { center, width });
    }
    if a.no_window {
        m.window = None;
    }
    cfg.morph.validate().config_err()?;

    let start = Instant::now();
    let mut inputs: Vec<PathBuf> = fs::read_dir(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))
        .data_err()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != INDEX_FILE))
        .collect();
    inputs.sort();
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .data_err()?;

    let mut done = Vec::new();
    let mut failed = 0usize;
    for path in &inputs {
        let result = (|| -> anyhow::Result<String> {
            let scan = match Raster::read(path)? {
                Raster::Raw(scan) => scan,
                Raster::Gray(_) => anyhow::bail!("already an 8-bit image"),
            };
            let gray = morph_preprocess(&scan, &cfg.morph)?;
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let name = format!("{stem}.pgm");
            gray.write(&a.out.join(&name))?;
            Ok(name)
        })();
        match result {
            Ok(name) => done.push((path.file_name().unwrap_or_default().to_string_lossy().into_owned(), name)),
            Err(e) => {
                failed += 1;
                eprintln!("error: {}: {e:#}", path.display());
            }
        }
    }

    let index_path = a.input.join(INDEX_FILE);
    if index_path.is_file() {
        let index = DatasetIndex::read(&index_path).data_err()?;
        let records: Vec<IndexRecord> = index
            .records
            .into_iter()
            .filter_map(|mut r| {
                let (_, out) = done.iter().find(|(src, _)| *src == r.path)?;
                r.path = out.clone();
                Some(r)
            })
            .collect();
        DatasetIndex::new(records)
            .and_then(|i| i.write(&a.out.join(INDEX_FILE)))
            .data_err()?;
    }
    println!(
        "preprocessed {} of {} files in {:.2} s ({failed} failed)",
        done.len(),
        inputs.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure::Data(anyhow!("{failed} of {} files failed", inputs.len())));
    }
    Ok(())
}

fn records_in(index: &DatasetIndex, split: Split) -> Vec<IndexRecord> {
    index.in_split(split).into_iter().cloned().collect()
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(&a.cfg)?;
    let t = &mut cfg.train;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    if let Some(lr) = a.lr {
        t.optimizer.lr = lr;
    }
    if let Some(bs) = a.batch_size {
        t.batch_size = bs;
        t.batch_size_unaugmented = bs;
    }
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    if a.no_augment {
        t.augment = false;
    }
    if a.no_balance {
        cfg.data.balance = false;
    }
    cfg.validate().config_err()?;

    let (index, base) = read_index(&a.data).data_err()?;
    let index = if index.records.iter().any(|r| r.split.is_none()) {
        datapipe::split(&index.records, cfg.data.split, cfg.seed).data_err()?
    } else {
        index
    };
    let mut train_recs = records_in(&index, Split::Train);
    if cfg.data.balance {
        train_recs = balance(&train_recs).context("balancing the train split").data_err()?;
    }
    let train_set = load_samples(&train_recs, &base, &cfg.morph).data_err()?;
    let val_set = load_samples(&records_in(&index, Split::Val), &base, &cfg.morph).data_err()?;
    let test_set = load_samples(&records_in(&index, Split::Test), &base, &cfg.morph).data_err()?;
    println!(
        "train {} (after balancing), val {}, test {}",
        train_set.len(),
        val_set.len(),
        test_set.len()
    );

    let model = match &a.pretrained {
        Some(path) => {
            let (model, report) = load_pretrained(path, cfg.model(), HeadPolicy::Reinitialize, cfg.seed).data_err()?;
            println!(
                "pretrained: {} tensors loaded ({} blocks), {} initialized, {} ignored",
                report.loaded.len(),
                report.loaded_blocks(),
                report.initialized.len(),
                report.ignored.len()
            );
            model
        }
        None => Dtvit::init(cfg.model(), cfg.seed).config_err()?,
    };

    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .data_err()?;
    write(&a.out.join(CONFIG_FILE), cfg.to_toml().config_err()?)?;
    // Image paths are made absolute so the split file is usable from the run directory.
    let data_dir = base
        .canonicalize()
        .with_context(|| format!("resolving {}", base.display()))
        .data_err()?;
    let mut splits = index.clone();
    for r in &mut splits.records {
        r.path = data_dir.join(&r.path).to_string_lossy().into_owned();
    }
    write(&a.out.join(SPLITS_FILE), splits.to_text())?;

    let outcome = fit(model, &train_set, &val_set, &cfg.train_config(), &cfg.augment, |r| {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
        println!(
            "epoch {:>3}  steps {:>5}  train loss {:.4}  acc {:.3}/{:.3}  val loss {}  acc {}/{}",
            r.epoch,
            r.steps,
            r.train_loss,
            r.train_presence_acc,
            r.train_location_acc,
            opt(r.val_loss),
            opt(r.val_presence_acc),
            opt(r.val_location_acc)
        );
    })
    .data_err()?;

    save_checkpoint(&a.out.join(CHECKPOINT_FILE), &outcome.best, None, None).data_err()?;
    save_checkpoint(&a.out.join(LAST_FILE), &outcome.last, Some(&outcome.optimizer), Some(cfg.seed)).data_err()?;
    write(&a.out.join(HISTORY_FILE), history_tsv(&outcome.history))?;
    println!("best epoch {} after {} steps", outcome.best_epoch, outcome.steps);

    if !test_set.is_empty() {
        let ev = evaluate(&outcome.best, &test_set, &cfg.augment, cfg.train.batch_size_test).data_err()?;
        let report = build_report(&ev, EvalScope::IchOnly)?;
        write(&a.out.join(REPORT_JSON), report.to_json().data_err()?)?;
        write(&a.out.join(REPORT_TEXT), report.to_string())?;
        print!("{report}");
    }
    Ok(())
}

fn build_report(ev: &Evaluation, scope: EvalScope) -> Result<Report, Failure> {
    let presence = ev.presence_confusion().data_err()?;
    let location = ev.location_confusion(scope).data_err()?;
    metrics::report(&presence, &location, scope).data_err()
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint).data_err()?;
    let cfg = config_for_checkpoint(a.config.as_deref(), &a.checkpoint, ck.model.config())?;
    let (index, base) = read_index(&a.data).data_err()?;
    let has_splits = index.records.iter().all(|r| r.split.is_some());
    let records = match (a.split, a.split.split()) {
        (SplitChoice::Auto, _) if has_splits => records_in(&index, Split::Test),
        (SplitChoice::Auto | SplitChoice::All, _) => index.records.clone(),
        (_, Some(_)) if !has_splits => return Err(Failure::Data(anyhow!("index has no split column"))),
        (_, Some(s)) => records_in(&index, s),
        (_, None) => unreachable!("auto and all are handled above"),
    };
    if records.is_empty() {
        return Err(Failure::Data(anyhow!("no records in the selected split")));
    }
    let samples = load_samples(&records, &base, &cfg.morph).data_err()?;
    let ev = evaluate(&ck.model, &samples, &cfg.augment, cfg.train.batch_size_test).data_err()?;
    let report = build_report(&ev, a.scope)?;
    print!("{report}");
    if let Some(out) = &a.out {
        write(out, report.to_json().data_err()?)?;
    }
    Ok(())
}

pub fn predict(a: PredictArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint).data_err()?;
    let cfg = config_for_checkpoint(a.config.as_deref(), &a.checkpoint, ck.model.config())?;
    let image = load_image(&a.image, &cfg.morph).data_err()?;
    let input = eval_transform(&image, &cfg.augment).data_err()?;
    let p = ck.model.predict(&input).data_err()?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ");
    println!(
        "{p}\tpresence [{}]\tlocation [{}]",
        fmt(&p.presence_probs),
        fmt(&p.location_probs)
    );
    Ok(())
}

fn print_tensors<'a>(rows: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> u64 {
    let mut total = 0u64;
    for (name, shape) in rows {
        let n: u64 = shape.iter().map(|&d| d as u64).product();
        total += n;
        let dims = shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        println!("{name}\t{dims}\t{n}");
    }
    total
}

pub fn inspect(a: InspectArgs) -> CmdResult {
    if let Some(path) = &a.checkpoint {
        let manifest = read_manifest(path).data_err()?;
        let total = print_tensors(
            manifest
                .tensors
                .iter()
                .filter(|e| !e.name.starts_with("optim."))
                .map(|e| (e.name.as_str(), e.shape.as_slice())),
        );
        let live = load_checkpoint(path).data_err()?.model.params().numel();
        if live != total {
            return Err(Failure::Data(anyhow!("manifest lists {total} parameters but the model holds {live}")));
        }
        println!("total\t{total}");
        return Ok(());
    }
    let model = a.preset.unwrap_or(Preset::Tiny).model();
    let (shapes, closed_form): (ShapeManifest, u64) = match a.reference_head {
        Some(classes) => {
            let enc = model.encoder;
            let mut m = enc.manifest();
            m.push(("head.weight".into(), vec![classes, enc.dim]));
            m.push(("head.bias".into(), vec![classes]));
            (m, count_params(&enc, HeadSpec::Linear { classes }))
        }
        None => (model.manifest(), model.count_params()),
    };
    let total = print_tensors(shapes.iter().map(|(n, s)| (n.as_str(), s.as_slice())));
    if total != manifest_numel(&shapes) || total != closed_form {
        return Err(Failure::Data(anyhow!(
            "tensor listing sums to {total} but the closed form gives {closed_form}"
        )));
    }
    println!("total\t{total}");
    Ok(())
}

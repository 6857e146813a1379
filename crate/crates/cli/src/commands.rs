use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use partloc::classify::{read_predictions, write_predictions, Classifier, PredictionRow};
use partloc::dataset::{load_cub, AnnotatedImage, Dataset, PartSpec, Split};
use partloc::detect::Detector;
use partloc::eval::{
    accuracy, cross_validate, pcp, recall, recall_csv, sweep_csv, sweep_svg, write_pcp_csv, CvInputs, SweepParam,
};
use partloc::featstore::{pgm_size, Features, GrayImage};
use partloc::infer::{Configuration, ConfigurationRecord};
use partloc::pipeline::{
    configuration_features, extract_features, fit_prior, ground_truth, infer_all, oracle_features,
    train_classifier_on_gt, train_detectors, with_jobs, PipelineConfig, RootMode,
};
use partloc::priors::{PriorModel, PriorVariant};
use partloc::proposals::{dense_propose, load_proposals, write_proposals, ProposalMap};
use partloc::synth::generate;

use crate::{Cli, Command, DataArgs, Metric, Param, SplitArg, Variant};

const MANIFEST: &str = "manifest.jsonl";
const PARTS: &str = "parts.json";
const PROPOSALS: &str = "proposals.csv";
const EFFECTIVE_CONFIG: &str = "effective_config.json";

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

/// Writes the effective configuration (minus the thread count, which never
/// changes results) next to a command's outputs.
fn echo_config(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut v = serde_json::to_value(cfg)?;
    if let Some(o) = v.as_object_mut() {
        o.remove("jobs");
    }
    fs::write(dir.join(EFFECTIVE_CONFIG), serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::create_dir_all(parent_dir(path))?;
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    let dir = parent_dir(path);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

struct Data {
    dir: PathBuf,
    dataset: Dataset,
    specs: Vec<PartSpec>,
}

impl Data {
    fn load(dir: &Path) -> Result<Self> {
        let dataset = Dataset::read_manifest(&dir.join(MANIFEST))?;
        let parts = dir.join(PARTS);
        let specs = if parts.exists() {
            let text = fs::read_to_string(&parts)?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", parts.display()))?
        } else {
            PartSpec::bird_defaults()
        };
        PartSpec::validate(&specs)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            dataset,
            specs,
        })
    }

    fn part_names(&self) -> Vec<String> {
        self.specs[1..].iter().map(|s| s.name.clone()).collect()
    }

    fn all_names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    fn image(&self, rec: &AnnotatedImage) -> partloc::Result<GrayImage> {
        GrayImage::read_pgm(&self.dir.join(&rec.path))
    }

    fn records(&self, split: SplitArg) -> Vec<&AnnotatedImage> {
        self.dataset
            .images
            .iter()
            .filter(|r| split_filter(split).is_none_or(|s| r.split == s))
            .collect()
    }
}

fn split_filter(s: SplitArg) -> Option<Split> {
    match s {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    }
}

fn load_data(args: &DataArgs) -> Result<(Data, ProposalMap)> {
    let data = Data::load(&args.data)?;
    let path = args.proposals.clone().unwrap_or_else(|| args.data.join(PROPOSALS));
    let proposals = load_proposals(&path)?;
    Ok((data, proposals))
}

fn detector_file(dir: &Path, spec: &PartSpec) -> PathBuf {
    dir.join(format!("detector_{}.json", spec.name))
}

fn load_detectors(dir: &Path, specs: &[PartSpec]) -> Result<Vec<Detector>> {
    specs
        .iter()
        .map(|s| {
            let p = detector_file(dir, s);
            Detector::load(&p).with_context(|| format!("loading {}", p.display()))
        })
        .collect()
}

fn read_configs(path: &Path, names: &[String]) -> Result<Vec<Configuration>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConfigurationRecord =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(Configuration::from_record(rec, names)?);
    }
    Ok(out)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let jobs = cfg.jobs;
    with_jobs(jobs, move || dispatch(cli.command, cfg))?
}

fn dispatch(command: Command, mut cfg: PipelineConfig) -> Result<()> {
    match command {
        Command::IngestCub { cub, out } => {
            let mut ds = load_cub(&cub)?;
            let images = cub.join("images");
            for r in &mut ds.images {
                r.path = images.join(&r.path).to_string_lossy().into_owned();
            }
            fs::create_dir_all(&out)?;
            ds.write_manifest(&out.join(MANIFEST))?;
            fs::write(out.join(PARTS), serde_json::to_string_pretty(&PartSpec::bird_defaults())? + "\n")?;
            echo_config(&out, &cfg)?;
            println!("{} images, {} classes", ds.len(), {
                let mut l = ds.labels();
                l.dedup();
                l.len()
            });
        }
        Command::GenSynth { out } => {
            let synth = generate(&cfg.synth, cfg.seed)?;
            synth.write(&out)?;
            echo_config(&out, &cfg)?;
            println!(
                "{} images, {} proposals",
                synth.dataset.len(),
                synth.proposals.values().map(|s| s.len()).sum::<usize>()
            );
        }
        Command::ExtractFeatures { data, out } => {
            let (d, props) = load_data(&data)?;
            let feats = extract_features(&d.dataset, &d.specs, &cfg.derivation, &props, |r| d.image(r))?;
            feats.save(&out)?;
            echo_config(&out, &cfg)?;
            println!("{} regions", feats.detector.len());
        }
        Command::LoadProposals { data, input, out } => {
            let d = Data::load(&data)?;
            let props = load_proposals(&input)?;
            for (id, set) in &props {
                let Some(rec) = d.dataset.get(*id) else {
                    bail!("{}: image {id} not in the manifest", input.display());
                };
                if let Some([w, h]) = rec.size {
                    if let Some(r) = set
                        .regions
                        .iter()
                        .find(|r| r.bbox.clip(w as f64, h as f64) != Some(r.bbox))
                    {
                        bail!("{}: image {id} region {} extends outside the image", input.display(), r.region_id);
                    }
                }
            }
            ensure_parent(&out)?;
            write_proposals(&out, &props)?;
            echo_config(&parent_dir(&out), &cfg)?;
            println!("{} images, {} proposals", props.len(), props.values().map(|s| s.len()).sum::<usize>());
        }
        Command::DensePropose { data, out } => {
            let d = Data::load(&data)?;
            let mut props = ProposalMap::new();
            for rec in &d.dataset.images {
                let (w, h) = match rec.size {
                    Some([w, h]) => (w as usize, h as usize),
                    None => pgm_size(&d.dir.join(&rec.path))?,
                };
                let set = dense_propose(
                    rec.image_id,
                    w as f64,
                    h as f64,
                    &cfg.dense.scales,
                    &cfg.dense.aspects,
                    cfg.dense.stride_fraction,
                )?;
                props.insert(rec.image_id, set);
            }
            ensure_parent(&out)?;
            write_proposals(&out, &props)?;
            echo_config(&parent_dir(&out), &cfg)?;
        }
        Command::TrainDetectors { data, features, out } => {
            let (d, props) = load_data(&data)?;
            let feats = Features::open(&features)?;
            let dets = train_detectors(&d.dataset, &d.specs, &cfg.derivation, &props, &feats, &cfg.detector)?;
            fs::create_dir_all(&out)?;
            for (spec, det) in d.specs.iter().zip(&dets) {
                det.save(&detector_file(&out, spec))?;
                println!(
                    "{}: tau {:.4}, {} positives, {} negatives",
                    spec.name, det.tau, det.train_meta.n_positive, det.train_meta.n_negative
                );
            }
            echo_config(&out, &cfg)?;
        }
        Command::FitPrior {
            data,
            features,
            variant,
            alpha,
            k,
            out,
        } => {
            if let Some(v) = variant {
                cfg.prior.variant = match v {
                    Variant::Null => PriorVariant::Null,
                    Variant::Box => PriorVariant::Box,
                    Variant::Mg => PriorVariant::Mg,
                    Variant::Np => PriorVariant::Np,
                };
            }
            if let Some(a) = alpha {
                cfg.prior.alpha = a;
            }
            if let Some(k) = k {
                cfg.prior.k = k;
            }
            let d = Data::load(&data.data)?;
            let feats = Features::open(&features)?;
            let model = fit_prior(&d.dataset, &d.specs, &cfg.derivation, &feats, cfg.prior)?;
            let dir = parent_dir(&out);
            fs::create_dir_all(&dir)?;
            // the appearance store travels with the model so the file is self-contained
            let store_name = if model.config.variant == PriorVariant::Np {
                let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let name = format!("{stem}.appearance.pgfs");
                feats.appearance.save(&dir.join(&name))?;
                Some(name)
            } else {
                None
            };
            model.save(&out, store_name.as_deref())?;
            echo_config(&dir, &cfg)?;
        }
        Command::Infer {
            data,
            features,
            detectors,
            prior,
            bbox_given,
            split,
            out,
        } => {
            let (d, props) = load_data(&data)?;
            let feats = Features::open(&features)?;
            let dets = load_detectors(&detectors, &d.specs)?;
            let model = PriorModel::load(&prior)?;
            if model.part_names != d.part_names() {
                bail!("prior parts {:?} do not match dataset parts {:?}", model.part_names, d.part_names());
            }
            cfg.prior = model.config;
            let mode = if bbox_given { RootMode::Given } else { RootMode::Unknown };
            let configs = infer_all(
                &d.dataset,
                split_filter(split),
                &props,
                &dets,
                &model,
                &feats,
                &cfg.infer,
                mode,
            )?;
            let names = d.part_names();
            let mut w = std::io::BufWriter::new(create_file(&out)?);
            for c in &configs {
                writeln!(w, "{}", serde_json::to_string(&c.to_record(&names))?)?;
            }
            w.flush()?;
            echo_config(&parent_dir(&out), &cfg)?;
            println!("{} configurations", configs.len());
        }
        Command::TrainClassifier {
            data,
            features,
            no_parts,
            out,
        } => {
            let d = Data::load(&data.data)?;
            let feats = Features::open(&features)?;
            let train = d.records(SplitArg::Train);
            let clf = train_classifier_on_gt(&train, &d.specs, &cfg.derivation, &feats, &cfg.classify, no_parts)?;
            ensure_parent(&out)?;
            clf.save(&out)?;
            echo_config(&parent_dir(&out), &cfg)?;
            println!("{} classes, dim {}", clf.n_classes(), clf.dim);
        }
        Command::Predict {
            data,
            features,
            classifier,
            configs,
            out,
        } => {
            let d = Data::load(&data.data)?;
            let feats = Features::open(&features)?;
            let clf = Classifier::load(&classifier)?;
            let root_only = clf.dim == feats.detector.channel().dim;
            let opts = clf.feature_options;
            let (ids, xs) = match &configs {
                Some(p) => {
                    let cs = read_configs(p, &d.part_names())?;
                    let xs = configuration_features(&cs, &feats, &opts, root_only)?;
                    (cs.iter().map(|c| c.image_id).collect::<Vec<_>>(), xs)
                }
                None => {
                    let test = d.records(SplitArg::Test);
                    let xs = oracle_features(&test, &d.specs, &cfg.derivation, &feats, &opts, root_only)?;
                    (test.iter().map(|r| r.image_id).collect(), xs)
                }
            };
            let mut rows = Vec::with_capacity(ids.len());
            for (id, x) in ids.iter().zip(&xs) {
                let rec = d.dataset.get(*id).with_context(|| format!("image {id} not in the manifest"))?;
                let p = clf.predict(x)?;
                let (t1, t2) = p.top2();
                rows.push(PredictionRow {
                    image_id: *id,
                    predicted: p.class,
                    actual: rec.label,
                    margin_top1: t1,
                    margin_top2: t2,
                });
            }
            ensure_parent(&out)?;
            write_predictions(&out, &rows)?;
            echo_config(&parent_dir(&out), &cfg)?;
            let hits = rows.iter().filter(|r| r.predicted == r.actual).count();
            println!("accuracy {:.4} ({hits}/{})", hits as f64 / rows.len().max(1) as f64, rows.len());
        }
        Command::Evaluate {
            data,
            metric,
            configs,
            predictions,
            thresholds,
            overlap,
            split,
            out,
        } => {
            let d = Data::load(&data.data)?;
            if let Some(o) = &out {
                ensure_parent(o)?;
                echo_config(&parent_dir(o), &cfg)?;
            }
            match metric {
                Metric::Pcp => {
                    let path = configs.context("--configs is required for pcp")?;
                    let cs = read_configs(&path, &d.part_names())?;
                    let gt = ground_truth(&d.dataset, &d.specs, &cfg.derivation);
                    let rows = pcp(&cs, &gt, &d.all_names(), overlap.unwrap_or(cfg.eval.overlap))?;
                    let mut text = String::from("part,correct,total,pcp\n");
                    for r in &rows {
                        text.push_str(&format!("{},{},{},{:.6}\n", r.part, r.correct, r.total, r.pcp));
                    }
                    print!("{text}");
                    if let Some(o) = &out {
                        write_pcp_csv(o, &rows)?;
                    }
                }
                Metric::Accuracy => {
                    let path = predictions.context("--predictions is required for accuracy")?;
                    let rows = read_predictions(&path)?;
                    let preds: BTreeMap<u64, u32> = rows.iter().map(|r| (r.image_id, r.predicted)).collect();
                    let labels: BTreeMap<u64, u32> = preds
                        .keys()
                        .map(|id| {
                            d.dataset
                                .get(*id)
                                .map(|r| (*id, r.label))
                                .with_context(|| format!("image {id} not in the manifest"))
                        })
                        .collect::<Result<_>>()?;
                    let a = accuracy(&preds, &labels)?;
                    emit(out.as_deref(), &format!("metric,value\naccuracy,{a:.6}\n"))?;
                }
                Metric::Recall => {
                    let path = data.proposals.clone().unwrap_or_else(|| d.dir.join(PROPOSALS));
                    let props = load_proposals(&path)?;
                    let th = thresholds.unwrap_or_else(|| cfg.eval.recall_thresholds.clone());
                    let mut gt: BTreeMap<String, Vec<(u64, partloc::BBox)>> = BTreeMap::new();
                    for rec in d.records(split) {
                        let boxes = partloc::dataset::ground_truth_parts(rec, &d.specs, &cfg.derivation);
                        for (spec, b) in d.specs.iter().zip(boxes) {
                            if let Some(b) = b {
                                gt.entry(spec.name.clone()).or_default().push((rec.image_id, b));
                            }
                        }
                    }
                    let table = recall(&props, &gt, &th)?;
                    emit(out.as_deref(), &recall_csv(&table, &d.all_names()))?;
                }
            }
        }
        Command::CvSweep {
            data,
            features,
            param,
            grid,
            folds,
            out,
        } => {
            let (d, props) = load_data(&data)?;
            let feats = Features::open(&features)?;
            let param = match param {
                Param::Alpha => SweepParam::Alpha,
                Param::K => SweepParam::K,
            };
            let grid = grid.unwrap_or_else(|| match param {
                SweepParam::Alpha => cfg.eval.alpha_grid.clone(),
                SweepParam::K => cfg.eval.k_grid.iter().map(|&k| k as f64).collect(),
            });
            if !cfg.prior.variant.is_geometric() {
                bail!("cv-sweep needs a geometric prior variant (mg or np)");
            }
            let folds = folds.unwrap_or(cfg.eval.folds);
            let inputs = CvInputs {
                dataset: &d.dataset,
                specs: &d.specs,
                derivation: &cfg.derivation,
                proposals: &props,
                features: &feats,
                detector: &cfg.detector,
                prior: cfg.prior,
                infer: cfg.infer,
                classify: cfg.classify,
            };
            let rows = cross_validate(&inputs, param, &grid, folds, cfg.seed)?;
            fs::create_dir_all(&out)?;
            let csv = sweep_csv(param, &rows);
            fs::write(out.join(format!("cv_{}.csv", param.name())), &csv)?;
            fs::write(out.join(format!("cv_{}.svg", param.name())), sweep_svg(param, &rows))?;
            echo_config(&out, &cfg)?;
            print!("{csv}");
        }
    }
    Ok(())
}

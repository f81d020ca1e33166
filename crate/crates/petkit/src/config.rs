//! Run configuration files.
//!
//! Flat `key = value` text grouped under `[section]` headers, one file per
//! run. `#` starts a comment. Unknown sections and keys are rejected so a
//! typo cannot silently fall back to a default. The only override sources
//! are the command-line flags `--out`, `--seed` and `--threads`.
//!
//! ```text
//! [backbone]
//! preset = desk            # desk | tiny | resnet50, or give stages= explicitly
//! stages = 16,8,32,2,1; 32,16,64,2,2
//! kernel_size = 3
//! num_classes = 4
//! input_channels = 1
//! nonlinearity = relu
//!
//! [tuning]
//! mode = adapter           # full_ft | linear_probe | bias_tuning | adapter
//! scheme = conv_parallel
//! gamma = 4
//! adapter_kernel = 3
//! init = zero_up           # zero_up | kaiming_both
//! alpha_init = 1.0
//!
//! [train]
//! lr = 1e-3
//! weight_decay = 0
//! epochs = 20
//! warmup_epochs = 2
//! batch_size = 32
//! seed = 0
//! augment = none           # none | fgvc
//! decay_alpha = false
//!
//! [data]
//! train = train.petd
//! val = val.petd           # optional; else val_fraction splits train
//! test = test.petd         # optional
//! val_fraction = 0.2
//! normalize = centered     # centered | unit
//!
//! [sweep]                  # only read by the sweep command
//! lrs = 1e-3, 5e-4, 1e-4, 5e-5, 1e-5
//! weight_decays = 1e-2, 1e-3, 1e-4, 0
//! gammas = 1, 2, 4
//!
//! [output]
//! dir = out
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use petkit_core::adapter::{AdapterConfig, InitScheme, Nonlinearity};
use petkit_core::backbone::{AttachScheme, BackboneConfig, StageConfig};
use petkit_core::data::{AugmentRecipe, Normalize};
use petkit_core::tuning::{Grid, TrainConfig, TuningMode};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeKind {
    Centered,
    Unit,
}

impl NormalizeKind {
    pub fn build(&self, channels: usize) -> Normalize {
        match self {
            NormalizeKind::Centered => Normalize::centered(channels),
            NormalizeKind::Unit => Normalize::unit(channels),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DataPaths {
    pub train: PathBuf,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub val_fraction: f32,
    pub normalize: NormalizeKind,
}

/// Everything a run needs, validated at parse time.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub mode: TuningMode,
    pub train: TrainConfig,
    pub data: DataPaths,
    pub sweep: Grid,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

fn err(line: usize, detail: impl Into<String>) -> Error {
    Error::Config {
        line: Some(line),
        detail: detail.into(),
    }
}

struct Section {
    entries: BTreeMap<String, (usize, String)>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }
}

fn parse_sections(text: &str) -> Result<BTreeMap<String, Section>> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            if sections.contains_key(&name) {
                return Err(err(line_no, format!("duplicate section [{name}]")));
            }
            sections.insert(
                name.clone(),
                Section {
                    entries: BTreeMap::new(),
                },
            );
            current = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(err(line_no, format!("expected `key = value`, got `{line}`")));
        };
        let Some(section) = current.as_ref() else {
            return Err(err(line_no, "key outside any [section]"));
        };
        let key = key.trim().to_string();
        let entry = (line_no, value.trim().to_string());
        let section = sections.get_mut(section).expect("section just inserted");
        if section.entries.insert(key.clone(), entry).is_some() {
            return Err(err(line_no, format!("duplicate key {key}")));
        }
    }
    Ok(sections)
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| err(line, format!("cannot parse {key} = `{value}`")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(err(line, format!("cannot parse {key} = `{value}` as bool"))),
    }
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| parse_num(line, key, s.trim()))
        .collect()
}

fn reject_leftovers(name: &str, section: &Section) -> Result<()> {
    if let Some((key, (line, _))) = section.entries.iter().next() {
        return Err(err(*line, format!("unknown key {key} in [{name}]")));
    }
    Ok(())
}

fn parse_stages(line: usize, value: &str) -> Result<Vec<StageConfig>> {
    let mut stages = Vec::new();
    for part in value.split(';') {
        let nums: Vec<usize> = parse_list(line, "stages", part)?;
        if nums.len() != 5 {
            return Err(err(
                line,
                format!(
                    "each stage needs 5 fields (c_in,c_mid,c_out,blocks,stride), got {}",
                    nums.len()
                ),
            ));
        }
        stages.push(StageConfig {
            c_in: nums[0],
            c_mid: nums[1],
            c_out: nums[2],
            num_blocks: nums[3],
            stride: nums[4],
        });
    }
    Ok(stages)
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut sections = parse_sections(text)?;
    let known = ["backbone", "tuning", "train", "data", "sweep", "output"];
    for (name, section) in &sections {
        if !known.contains(&name.as_str()) {
            let line = section.entries.values().next().map(|(l, _)| *l).unwrap_or(0);
            return Err(err(line, format!("unknown section [{name}]")));
        }
    }

    // [backbone]
    let backbone = {
        let mut s = sections.remove("backbone").ok_or(Error::Config {
            line: None,
            detail: "missing [backbone] section".into(),
        })?;
        let num_classes = match s.take("num_classes") {
            Some((l, v)) => parse_num(l, "num_classes", &v)?,
            None => {
                return Err(Error::Config {
                    line: None,
                    detail: "[backbone] needs num_classes".into(),
                })
            }
        };
        let input_channels = match s.take("input_channels") {
            Some((l, v)) => parse_num(l, "input_channels", &v)?,
            None => 3,
        };
        let mut config = match s.take("preset") {
            Some((l, v)) => match v.as_str() {
                "desk" => BackboneConfig::desk_default(num_classes, input_channels),
                "tiny" => BackboneConfig::tiny(num_classes, input_channels),
                "resnet50" => {
                    let mut c = BackboneConfig::resnet50_shape(num_classes);
                    c.input_channels = input_channels;
                    c
                }
                other => return Err(err(l, format!("unknown preset `{other}`"))),
            },
            None => BackboneConfig::desk_default(num_classes, input_channels),
        };
        if let Some((l, v)) = s.take("stages") {
            config.stages = parse_stages(l, &v)?;
        }
        if let Some((l, v)) = s.take("kernel_size") {
            config.kernel_size = parse_num(l, "kernel_size", &v)?;
        }
        if let Some((l, v)) = s.take("nonlinearity") {
            config.nonlinearity = match v.as_str() {
                "relu" => Nonlinearity::Relu,
                "gelu" => Nonlinearity::Gelu,
                other => return Err(err(l, format!("unknown nonlinearity `{other}`"))),
            };
        }
        reject_leftovers("backbone", &s)?;
        config
    };
    backbone.validate().map_err(Error::Core)?;

    // [tuning]
    let mode = {
        let mut s = sections.remove("tuning").unwrap_or(Section {
            entries: BTreeMap::new(),
        });
        let mode_name = s.take("mode").map(|(_, v)| v).unwrap_or("full_ft".into());
        let mut adapter = AdapterConfig::new(4, 3);
        adapter.nonlinearity = backbone.nonlinearity;
        if let Some((l, v)) = s.take("gamma") {
            adapter.gamma = parse_num(l, "gamma", &v)?;
        }
        if let Some((l, v)) = s.take("adapter_kernel") {
            adapter.kernel_size = parse_num(l, "adapter_kernel", &v)?;
        }
        if let Some((l, v)) = s.take("alpha_init") {
            adapter.alpha_init = parse_num(l, "alpha_init", &v)?;
        }
        if let Some((l, v)) = s.take("init") {
            adapter.init_scheme = match v.as_str() {
                "zero_up" => InitScheme::ZeroUp,
                "kaiming_both" => InitScheme::KaimingBoth,
                other => return Err(err(l, format!("unknown init `{other}`"))),
            };
        }
        let scheme = match s.take("scheme") {
            Some((l, v)) => match v.as_str() {
                "conv_parallel" => AttachScheme::ConvParallel,
                "conv_sequential" => AttachScheme::ConvSequential,
                "residual_parallel" => AttachScheme::ResidualParallel,
                "residual_sequential" => AttachScheme::ResidualSequential,
                other => return Err(err(l, format!("unknown scheme `{other}`"))),
            },
            None => AttachScheme::ConvParallel,
        };
        let mode = match mode_name.as_str() {
            "full_ft" => TuningMode::FullFineTune,
            "linear_probe" => TuningMode::LinearProbe,
            "bias_tuning" => TuningMode::BiasTuning,
            "adapter" => TuningMode::Adapter {
                scheme,
                config: adapter,
            },
            other => {
                return Err(Error::Config {
                    line: None,
                    detail: format!("unknown tuning mode `{other}`"),
                })
            }
        };
        reject_leftovers("tuning", &s)?;
        mode
    };

    // [train]
    let train = {
        let mut s = sections.remove("train").unwrap_or(Section {
            entries: BTreeMap::new(),
        });
        let mut cfg = TrainConfig::new(1e-3, 100, 32, 0);
        cfg.warmup_epochs = 10;
        if let Some((l, v)) = s.take("lr") {
            cfg.lr = parse_num(l, "lr", &v)?;
        }
        if let Some((l, v)) = s.take("weight_decay") {
            cfg.weight_decay = parse_num(l, "weight_decay", &v)?;
        }
        if let Some((l, v)) = s.take("epochs") {
            cfg.total_epochs = parse_num(l, "epochs", &v)?;
            cfg.warmup_epochs = (cfg.total_epochs / 10).max(1).min(cfg.total_epochs);
        }
        if let Some((l, v)) = s.take("warmup_epochs") {
            cfg.warmup_epochs = parse_num(l, "warmup_epochs", &v)?;
        }
        if let Some((l, v)) = s.take("batch_size") {
            cfg.batch_size = parse_num(l, "batch_size", &v)?;
        }
        if let Some((l, v)) = s.take("seed") {
            cfg.seed = parse_num(l, "seed", &v)?;
        }
        if let Some((l, v)) = s.take("decay_alpha") {
            cfg.decay_alpha = parse_bool(l, "decay_alpha", &v)?;
        }
        if let Some((l, v)) = s.take("augment") {
            cfg.augment = match v.as_str() {
                "none" => AugmentRecipe::None,
                "fgvc" => AugmentRecipe::fgvc(),
                other => return Err(err(l, format!("unknown augment recipe `{other}`"))),
            };
        }
        cfg.validate().map_err(Error::Core)?;
        reject_leftovers("train", &s)?;
        cfg
    };

    // [data]
    let data = {
        let mut s = sections.remove("data").unwrap_or(Section {
            entries: BTreeMap::new(),
        });
        let train_path = s.take("train").map(|(_, v)| PathBuf::from(v));
        let val = s.take("val").map(|(_, v)| PathBuf::from(v));
        let test = s.take("test").map(|(_, v)| PathBuf::from(v));
        let val_fraction = match s.take("val_fraction") {
            Some((l, v)) => parse_num(l, "val_fraction", &v)?,
            None => 0.2,
        };
        let normalize = match s.take("normalize") {
            Some((l, v)) => match v.as_str() {
                "centered" => NormalizeKind::Centered,
                "unit" => NormalizeKind::Unit,
                other => return Err(err(l, format!("unknown normalize `{other}`"))),
            },
            None => NormalizeKind::Centered,
        };
        reject_leftovers("data", &s)?;
        DataPaths {
            train: train_path.unwrap_or_default(),
            val,
            test,
            val_fraction,
            normalize,
        }
    };

    // [sweep]
    let sweep = {
        let mut s = sections.remove("sweep").unwrap_or(Section {
            entries: BTreeMap::new(),
        });
        let mut grid = Grid::standard();
        if let Some((l, v)) = s.take("lrs") {
            grid.lrs = parse_list(l, "lrs", &v)?;
        }
        if let Some((l, v)) = s.take("weight_decays") {
            grid.weight_decays = parse_list(l, "weight_decays", &v)?;
        }
        if let Some((l, v)) = s.take("gammas") {
            grid.gammas = parse_list(l, "gammas", &v)?;
        }
        reject_leftovers("sweep", &s)?;
        grid
    };

    // [output]
    let out_dir = {
        let mut s = sections.remove("output").unwrap_or(Section {
            entries: BTreeMap::new(),
        });
        let dir = s
            .take("dir")
            .map(|(_, v)| PathBuf::from(v))
            .unwrap_or_else(|| PathBuf::from("out"));
        reject_leftovers("output", &s)?;
        dir
    };

    Ok(RunConfig {
        backbone,
        mode,
        train,
        data,
        sweep,
        out_dir,
    })
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_run_config(&text)
}

//! `--config FILE` plus one `--<key> VALUE` flag per model config key.
//!
//! The flag set is derived from the serialized default config, so new config
//! fields become flags without touching this file.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{value_parser, Arg, ArgMatches, Args, Command, FromArgMatches};

use card::ModelConfig;

const CONFIG_ID: &str = "config";

#[derive(Debug, Clone, Default)]
pub struct ConfigArgs {
    pub file: Option<PathBuf>,
    pub overrides: BTreeMap<String, String>,
}

impl ConfigArgs {
    pub fn load(&self) -> card::Result<ModelConfig> {
        card::load_config(self.file.as_deref(), &self.overrides)
    }
}

fn config_keys() -> Vec<String> {
    let text = ModelConfig::default().to_toml_string();
    let table: toml::Table = toml::from_str(&text).expect("default config is valid TOML");
    table.keys().cloned().collect()
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(matches: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = ConfigArgs::default();
        out.update_from_arg_matches(matches)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, matches: &ArgMatches) -> Result<(), clap::Error> {
        if let Some(p) = matches.get_one::<PathBuf>(CONFIG_ID) {
            self.file = Some(p.clone());
        }
        for key in config_keys() {
            if let Some(v) = matches.get_one::<String>(&key) {
                self.overrides.insert(key, v.clone());
            }
        }
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let mut cmd = cmd.arg(
            Arg::new(CONFIG_ID)
                .long(CONFIG_ID)
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .help("TOML model config; individual keys can be overridden by flags"),
        );
        for key in config_keys() {
            cmd = cmd.arg(
                Arg::new(key.clone())
                    .long(key)
                    .value_name("VALUE")
                    .help_heading("Config overrides"),
            );
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

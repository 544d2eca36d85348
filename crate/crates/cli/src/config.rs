//! Config-file defaults. Precedence is flags, then `C2Q_*` environment
//! variables, then the TOML file named by `--config` / `C2Q_CONFIG`.
//!
//! ```toml
//! threads = 4            # top-level keys apply to every subcommand
//!
//! [retrieve]
//! profile = "webdisc-cc"
//! k = 1000
//! ```
//!
//! Keys are long flag names. File values are spliced into argv as flags
//! unless the flag is already present or its environment variable is set.

use std::ffi::OsString;

use clap::Command;
use conv2query::{Error, Result};

fn flag_present(argv: &[OsString], long: &str) -> bool {
    let bare = format!("--{long}");
    let eq = format!("--{long}=");
    argv.iter().any(|a| {
        let a = a.to_string_lossy();
        a == bare || a.starts_with(&eq)
    })
}

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    std::env::var_os("C2Q_CONFIG")
}

fn render(value: &toml::Value) -> Result<Option<String>> {
    Ok(match value {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        toml::Value::Boolean(true) => None,
        toml::Value::Boolean(false) => return Ok(Some(String::new())),
        other => {
            return Err(Error::validation(format!(
                "unsupported config value {other}"
            )))
        }
    })
}

/// Returns argv with config-file defaults appended.
pub fn apply_config_file(cmd: &Command, argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let path = std::path::PathBuf::from(path);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;

    let sub = argv.iter().skip(1).find_map(|a| {
        let a = a.to_string_lossy();
        cmd.get_subcommands().find(|s| s.get_name() == a)
    });
    let Some(sub) = sub else {
        return Ok(argv);
    };

    let mut entries: Vec<(&String, &toml::Value)> = table.iter().filter(|(_, v)| !v.is_table()).collect();
    if let Some(toml::Value::Table(t)) = table.get(sub.get_name()) {
        entries.retain(|(k, _)| !t.contains_key(*k));
        entries.extend(t.iter());
    }

    let mut out = argv.clone();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| {
                Error::validation(format!(
                    "{}: unknown key {key:?} for {}",
                    path.display(),
                    sub.get_name()
                ))
            })?;
        if key == "config" || flag_present(&argv, key) {
            continue;
        }
        if arg.get_env().is_some_and(|env| std::env::var_os(env).is_some()) {
            continue;
        }
        match render(value)? {
            Some(v) if v.is_empty() => {}
            Some(v) => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
            None => out.push(format!("--{key}").into()),
        }
    }
    Ok(out)
}

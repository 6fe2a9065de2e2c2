//! Flat `key = value` run configuration merged under command-line flags.

use std::ffi::OsString;

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Command};

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses the config grammar: one `key = value` per line, `#` starts a
/// comment, blank lines are ignored. Keys may use `-` or `_`.
pub fn parse(text: &str) -> Result<Vec<Entry>, String> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`, found `{line}`", i + 1));
        };
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(format!("line {}: duplicate key `{key}`", i + 1));
        }
        out.push(Entry { key, value: v.trim().to_string(), line: i + 1 });
    }
    Ok(out)
}

fn settable(cmd: &Command) -> Vec<&clap::Arg> {
    cmd.get_arguments()
        .filter(|a| a.get_long().is_some() && !matches!(a.get_id().as_str(), "config" | "help"))
        .collect()
}

/// Keys a config file may set for `cmd`.
pub fn valid_keys(cmd: &Command) -> Vec<String> {
    settable(cmd).iter().map(|a| a.get_id().to_string()).collect()
}

/// Command-line arguments equivalent to the file entries that were not
/// already given as flags.
pub fn file_args(cmd: &Command, matches: &ArgMatches, entries: &[Entry]) -> Result<Vec<OsString>, String> {
    let args = settable(cmd);
    let mut out = Vec::new();
    for e in entries {
        let Some(arg) = args.iter().find(|a| a.get_id().as_str() == e.key) else {
            return Err(format!(
                "line {}: unknown key `{}`; valid keys: {}",
                e.line,
                e.key,
                valid_keys(cmd).join(", ")
            ));
        };
        if matches.value_source(&e.key) == Some(ValueSource::CommandLine) {
            continue;
        }
        let flag = format!("--{}", arg.get_long().expect("settable args are long"));
        match arg.get_action() {
            ArgAction::SetTrue => match e.value.as_str() {
                "true" => out.push(flag.into()),
                "false" => {}
                v => return Err(format!("line {}: `{}` must be true or false, found `{v}`", e.line, e.key)),
            },
            _ => {
                out.push(flag.into());
                out.push(e.value.clone().into());
            }
        }
    }
    Ok(out)
}

/// `key = value` lines for every settable argument, as resolved.
pub fn render(cmd: &Command, matches: &ArgMatches) -> String {
    let mut out = String::new();
    for a in settable(cmd) {
        let id = a.get_id().as_str();
        let value = match a.get_action() {
            ArgAction::SetTrue => matches.get_flag(id).to_string(),
            _ => match matches.get_raw(id) {
                Some(vals) => vals.map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>().join(","),
                None => continue,
            },
        };
        out.push_str(&format!("{id} = {value}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blanks_and_dashes() {
        let e = parse("# run\n\nbase-lr = 1e-3  # peak\nseed=7\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].key.as_str(), e[0].value.as_str(), e[0].line), ("base_lr", "1e-3", 3));
        assert_eq!((e[1].key.as_str(), e[1].value.as_str()), ("seed", "7"));
    }

    #[test]
    fn missing_equals_and_duplicates_are_rejected() {
        assert!(parse("seed 7").unwrap_err().contains("line 1"));
        assert!(parse("seed = 1\nseed = 2").unwrap_err().contains("duplicate"));
    }
}

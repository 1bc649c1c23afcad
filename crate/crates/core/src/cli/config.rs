use std::ffi::OsString;

use clap::ArgAction;

use crate::error::{Error, Result};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line {}: expected `key = value`", ln + 1)))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim().to_string());
        if k.is_empty() {
            return Err(Error::Format(format!("config line {}: empty key", ln + 1)));
        }
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Format(format!("config key {k:?} given twice")));
        }
        out.push((k, v));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            return Some(p.into());
        }
    }
    None
}

/// Rewrites the argument list so config entries appear as flags directly
/// after the subcommand name, ahead of every flag given explicitly.
pub fn inject_config(cmd: &clap::Command, args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else { return Ok(args) };
    let text = crate::io::read_text(&path)?;
    let entries = parse_config(&text)?;
    let Some((pos, sub)) =
        args.iter().enumerate().skip(1).find_map(|(i, a)| cmd.get_subcommands().find(|s| a == s.get_name()).map(|s| (i, s)))
    else {
        return Ok(args);
    };
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        if key == "config" || key == "help" || key == "version" {
            return Err(Error::Invalid(format!("config key {key:?} is not allowed")));
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| Error::Invalid(format!("unknown config key {key:?} for `{}`", sub.get_name())))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" | "1" | "yes" => extra.push(format!("--{key}").into()),
                "false" | "0" | "no" => {}
                _ => return Err(Error::Invalid(format!("config key {key:?} expects true or false"))),
            }
        } else {
            extra.push(format!("--{key}").into());
            extra.push(value.into());
        }
    }
    let mut out = args;
    out.splice(pos + 1..pos + 1, extra);
    Ok(out)
}

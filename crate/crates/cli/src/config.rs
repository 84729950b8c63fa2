//! Flat `key=value` config files, spliced into argv ahead of the user's own
//! subcommand flags so that those win.

use std::ffi::OsString;
use std::path::Path;

use clap::CommandFactory;

use crate::args::Cli;
use crate::CliError;

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("config line {}: expected key=value", k + 1)))?;
        let key = key.trim().trim_start_matches("--");
        if key.is_empty() {
            return Err(CliError::Input(format!("config line {}: empty key", k + 1)));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Flags for `subcommand` equivalent to the config pairs.
pub fn to_flags(subcommand: &str, pairs: &[(String, String)]) -> Result<Vec<OsString>, CliError> {
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(subcommand)
        .ok_or_else(|| CliError::Input(format!("unknown subcommand {subcommand}")))?;
    let mut flags = Vec::new();
    for (key, value) in pairs {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Input(format!("config key {key:?} is not a flag of {subcommand}")))?;
        if arg.get_action().takes_values() {
            flags.push(OsString::from(format!("--{key}={value}")));
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => flags.push(OsString::from(format!("--{key}"))),
                "false" | "0" | "no" => {}
                _ => return Err(CliError::Input(format!("config key {key:?} expects true or false"))),
            }
        }
    }
    Ok(flags)
}

/// Inserts the config-file flags right after the subcommand token.
pub fn splice(argv: &[OsString], subcommand: &str, path: &Path) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("reading config {}: {e}", path.display())))?;
    let flags = to_flags(subcommand, &parse_pairs(&text)?)?;
    let pos = argv
        .iter()
        .position(|a| a == subcommand)
        .ok_or_else(|| CliError::Input("subcommand not found in arguments".into()))?;
    let mut out = argv[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

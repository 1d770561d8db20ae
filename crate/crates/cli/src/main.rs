//! Command-line front end: dataset generation, aggregation, gradient checks,
//! schedule tables, training, evaluation and ablation grids.

mod args;
mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::Cli;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<pdfuse::Error> for CliError {
    fn from(e: pdfuse::Error) -> Self {
        if e.is_runtime() {
            CliError::Runtime(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

/// Replaces each `@path` argument by the lines of that file, skipping blank
/// lines and `#` comments.
fn expand_argfiles(raw: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut out = Vec::with_capacity(raw.len());
    for (i, arg) in raw.into_iter().enumerate() {
        match arg.to_str().and_then(|s| s.strip_prefix('@')) {
            Some(path) if i > 0 => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read argument file {path}: {e}")))?;
                out.extend(
                    text.lines()
                        .map(str::trim)
                        .filter(|l| !l.is_empty() && !l.starts_with('#'))
                        .map(OsString::from),
                );
            }
            _ => out.push(arg),
        }
    }
    Ok(out)
}

/// Arguments as replayed from an echo file: everything except `--out-dir`.
fn echo_args(args: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut iter = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned());
    while let Some(a) = iter.next() {
        if a == "--out-dir" {
            iter.next();
        } else if !a.starts_with("--out-dir=") {
            out.push(a);
        }
    }
    out
}

fn write_echo(out_dir: &Path, name: &str, args: &[String], resolved: &str) -> Result<(), CliError> {
    let mut text = format!("# replay: pdfuse --out-dir DIR @{name}.args\n");
    for line in resolved.lines() {
        text.push_str(&format!("# {line}\n"));
    }
    for a in args {
        text.push_str(a);
        text.push('\n');
    }
    let path = out_dir.join(format!("{name}.args"));
    std::fs::write(&path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn run(raw: Vec<OsString>) -> Result<(), CliError> {
    let args = expand_argfiles(raw)?;
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    std::fs::create_dir_all(&cli.global.out_dir).map_err(|e| {
        CliError::Runtime(format!("cannot create {}: {e}", cli.global.out_dir.display()))
    })?;
    let resolved = commands::resolved_config(&cli)?;
    write_echo(&cli.global.out_dir, cli.command.name(), &echo_args(&args), &resolved)?;
    commands::execute(&cli)
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pdfuse: {}", e.to_string().trim_end());
            ExitCode::from(match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Runtime(_) => EXIT_RUNTIME,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn out_dir_is_left_out_of_the_echo() {
        let got = echo_args(&os(&["pdfuse", "--out-dir", "a", "--seed", "3", "--out-dir=b", "schedule"]));
        assert_eq!(got, ["--seed", "3", "schedule"]);
    }

    #[test]
    fn argfiles_expand_in_place() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x.args");
        std::fs::write(&f, "# comment\n--seed\n\n 4 \nschedule\n").unwrap();
        let at = format!("@{}", f.display());
        let got = expand_argfiles(os(&["pdfuse", "--out-dir", "o", &at])).unwrap();
        assert_eq!(got, os(&["pdfuse", "--out-dir", "o", "--seed", "4", "schedule"]));
        assert!(matches!(expand_argfiles(os(&["pdfuse", "@/no/such/file"])), Err(CliError::Usage(_))));
    }
}

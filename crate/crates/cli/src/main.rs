use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::{ContextKind, ContextValue};
use clap::{Arg, ArgAction};
use steinlab_cli::config::{ALIASES, KEYS};
use steinlab_cli::{parse_config, run, CliError};

fn cli() -> clap::Command {
    let mut c = clap::Command::new("steinlab")
        .about("Stein-method numerics for Langevin diffusions: runs one experiment and writes CSV/JSON artifacts")
        .arg(Arg::new("command").value_name("COMMAND").help("probe | simulate | bismut-check | stein-solve | residual | pair-bound | ula-scaling | clt-rate | contraction | lemma-suite"))
        .arg(Arg::new("config").long("config").value_name("PATH").help("flat `key = value` config file; flags win over it"));
    for (key, help) in KEYS.iter().filter(|(k, _)| *k != "command") {
        let mut arg = Arg::new(*key).long(*key).value_name("VALUE").help(*help).action(ArgAction::Set);
        for (alias, _) in ALIASES.iter().filter(|(_, k)| k == key) {
            arg = arg.alias(*alias);
        }
        c = c.arg(arg);
    }
    c
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let m = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let mut v = serde_json::json!({ "status": "error", "kind": "usage", "message": e.to_string().trim() });
            if let Some(ContextValue::String(arg)) = e.get(ContextKind::InvalidArg) {
                v["key"] = serde_json::json!(arg.trim_start_matches('-'));
            }
            eprintln!("{v}");
            return ExitCode::from(2);
        }
    };
    let mut flags: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    if let Some(c) = m.get_one::<String>("command") {
        flags.push(("command".into(), c.clone()));
    }
    let file = m.get_one::<String>("config").map(PathBuf::from);
    let cfg = match parse_config(file.as_deref(), &flags) {
        Ok(c) => c,
        Err(e) => return fail(e.into()),
    };
    match run(&cfg) {
        Ok(report) => {
            println!("{}", report.summary);
            if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => fail(e),
    }
}

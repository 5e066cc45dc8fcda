use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use tokenlab::experiment::{write_outputs, RunConfig, COMMANDS};
use tokenlab::Error;

fn cli() -> Command {
    let mut app = Command::new("tokenlab")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Token-reduction collapse diagnostics and reduction experiments")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for spec in COMMANDS {
        let mut sub = Command::new(spec.name)
            .about(spec.about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("key=value config file; flags override its entries"),
            )
            .arg(
                Arg::new("out")
                    .long("out")
                    .value_name("DIR")
                    .default_value(".")
                    .help("output directory"),
            );
        for &(key, help) in spec.keys() {
            sub = sub.arg(
                Arg::new(key)
                    .long(key.replace('_', "-"))
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(help),
            );
        }
        app = app.subcommand(sub);
    }
    app
}

fn run(name: &str, m: &ArgMatches) -> Result<PathBuf, Error> {
    let spec = COMMANDS.iter().find(|c| c.name == name).expect("registered");
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::new(),
    };
    for &(key, _) in spec.keys() {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v);
        }
    }
    let out = PathBuf::from(m.get_one::<String>("out").expect("defaulted"));
    let outputs = (spec.run)(&cfg)?;
    write_outputs(&out, &outputs)?;
    Ok(out)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(out) => {
            eprintln!("tokenlab {name}: wrote results to {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tokenlab {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

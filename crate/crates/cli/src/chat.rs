//! Terminal chat loop.
//!
//! Lines starting with `/` are commands: `/entity <name>` tags an entity
//! for the next message, `/recs [k]` lists recommendations, `/quit` exits.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ccrs_core::engine::{ChatResponse, EntityRef, Engine, SessionOptions, SessionView, ANONYMOUS};
use ccrs_core::pipeline::Bundle;
use clap::Args;

use crate::{write_file, CliResult, Failure};

#[derive(Args)]
pub struct ChatArgs {
    #[arg(long, default_value = ANONYMOUS)]
    user: String,
    /// Fine-tune on the user's stored support conversations first.
    #[arg(long)]
    adapt: bool,
    /// Save the transcript as JSON on exit.
    #[arg(long)]
    log: Option<PathBuf>,
}

/// Matches a typed name against entity names, ignoring case and treating
/// spaces as underscores.
fn resolve(engine: &Engine, typed: &str) -> Option<String> {
    let want = typed.trim().replace(' ', "_").to_lowercase();
    engine.bundle().prepared.kg.entities().iter().find(|e| e.to_lowercase() == want).cloned()
}

fn print_response(out: &mut impl Write, r: &ChatResponse) -> std::io::Result<()> {
    writeln!(out, "bot: {}", r.text)?;
    let items: Vec<String> = r.items.iter().map(|i| format!("{} ({:.3})", i.name, i.score)).collect();
    writeln!(out, "  items: {}", items.join(", "))?;
    let styles: Vec<String> = r.style_weights.iter().map(|w| format!("{w:.2}")).collect();
    writeln!(out, "  styles: [{}]", styles.join(", "))
}

pub fn run(run_dir: &Path, args: &ChatArgs) -> CliResult {
    let engine = Engine::new(Bundle::load(run_dir)?)?;
    let mut session = engine.create_session(&args.user, SessionOptions { adapt: args.adapt, trace: false })?;
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    let io = |e: std::io::Error| Failure::env(e.to_string());
    if let Some(w) = &session.warning {
        writeln!(out, "note: {w}").map_err(io)?;
    }
    let mut pending: Vec<EntityRef> = Vec::new();
    let mut lines = stdin.lock().lines();
    loop {
        write!(out, "> ").map_err(io)?;
        out.flush().map_err(io)?;
        let Some(line) = lines.next() else { break };
        let line = line.map_err(io)?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" {
            break;
        } else if let Some(name) = line.strip_prefix("/entity") {
            match resolve(&engine, name) {
                Some(e) => {
                    writeln!(out, "tagged {e}").map_err(io)?;
                    pending.push(EntityRef::Name(e));
                }
                None => {
                    let near = engine.near_matches(name.trim(), 3);
                    writeln!(out, "unknown entity {:?}; did you mean: {}", name.trim(), near.join(", ")).map_err(io)?;
                }
            }
        } else if let Some(k) = line.strip_prefix("/recs") {
            let k = k.trim().parse().unwrap_or(5);
            for i in engine.recommendations(&mut session, k.max(1), false)? {
                writeln!(out, "  {}. {} ({:.3})", i.rank, i.name, i.score).map_err(io)?;
            }
        } else if line.starts_with('/') {
            writeln!(out, "commands: /entity <name>, /recs [k], /quit").map_err(io)?;
        } else {
            let r = engine.post_message(&mut session, line, &pending)?;
            pending.clear();
            print_response(&mut out, &r).map_err(io)?;
        }
    }
    if let Some(path) = &args.log {
        let view = SessionView::from(&session);
        write_file(path, &serde_json::to_string_pretty(&view).expect("plain struct"))?;
    }
    Ok(())
}

//! Line-oriented dataset files: one JSON object per line, the step records of
//! an episode followed by its meta record.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{EpisodeRecord, Outcome, Source, StepRow};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Line {
    Step {
        episode_id: u64,
        step_index: usize,
        vision: Vec<f64>,
        proprio: Vec<f64>,
        force: Vec<f64>,
        tactile: Vec<f64>,
        action: Vec<f64>,
        trigger: f64,
        source: Source,
    },
    Meta {
        episode_id: u64,
        schema_version: u32,
        instruction: usize,
        success: bool,
        peeled: Option<f64>,
        domain_seed: u64,
        steps: usize,
    },
}

pub fn write_dataset_to<W: Write>(mut w: W, episodes: &[EpisodeRecord]) -> Result<()> {
    for ep in episodes {
        for (i, r) in ep.rows.iter().enumerate() {
            let line = Line::Step {
                episode_id: ep.episode_id,
                step_index: i,
                vision: r.vision.clone(),
                proprio: r.proprio.clone(),
                force: r.force.clone(),
                tactile: r.tactile.clone(),
                action: r.action.clone(),
                trigger: r.trigger,
                source: r.source,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        let meta = Line::Meta {
            episode_id: ep.episode_id,
            schema_version: SCHEMA_VERSION,
            instruction: ep.instruction,
            success: ep.outcome.success,
            peeled: ep.outcome.peeled,
            domain_seed: ep.domain_seed,
            steps: ep.rows.len(),
        };
        serde_json::to_writer(&mut w, &meta)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: impl AsRef<Path>, episodes: &[EpisodeRecord]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    write_dataset_to(BufWriter::new(File::create(&tmp)?), episodes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_dataset_from<R: BufRead>(r: R) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    let mut open: Option<(u64, Vec<StepRow>)> = None;
    let mut seen = HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse { line: n, msg: e.to_string() })?;
        match parsed {
            Line::Step {
                episode_id,
                step_index,
                vision,
                proprio,
                force,
                tactile,
                action,
                trigger,
                source,
            } => {
                if seen.contains(&episode_id) {
                    return Err(Error::Parse { line: n, msg: format!("episode {episode_id}: step after its meta record") });
                }
                let rows = match &mut open {
                    Some((id, rows)) if *id == episode_id => rows,
                    Some((id, _)) => {
                        return Err(Error::Parse { line: n, msg: format!("episode {id}: missing meta record before episode {episode_id}") })
                    }
                    None => &mut open.insert((episode_id, Vec::new())).1,
                };
                if step_index != rows.len() {
                    return Err(Error::Parse {
                        line: n,
                        msg: format!("episode {episode_id}: step index {step_index}, expected {}", rows.len()),
                    });
                }
                rows.push(StepRow { vision, proprio, force, tactile, action, trigger, source });
            }
            Line::Meta {
                episode_id,
                schema_version,
                instruction,
                success,
                peeled,
                domain_seed,
                steps,
            } => {
                if schema_version != SCHEMA_VERSION {
                    return Err(Error::SchemaVersion { found: schema_version, expected: SCHEMA_VERSION });
                }
                if !seen.insert(episode_id) {
                    return Err(Error::Parse { line: n, msg: format!("episode {episode_id}: second meta record") });
                }
                let rows = match open.take() {
                    Some((id, rows)) if id == episode_id => rows,
                    Some((id, _)) => return Err(Error::Parse { line: n, msg: format!("episode {id}: missing meta record") }),
                    None => Vec::new(),
                };
                if rows.len() != steps {
                    return Err(Error::Parse {
                        line: n,
                        msg: format!("episode {episode_id}: meta counts {steps} steps, found {}", rows.len()),
                    });
                }
                out.push(EpisodeRecord {
                    episode_id,
                    instruction,
                    domain_seed,
                    rows,
                    outcome: Outcome { success, peeled },
                });
            }
        }
    }
    if let Some((id, _)) = open {
        return Err(Error::Parse { line: 0, msg: format!("episode {id}: missing meta record at end of file") });
    }
    Ok(out)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<EpisodeRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_dataset_from(BufReader::new(File::open(path)?))
}

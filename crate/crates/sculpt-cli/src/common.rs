//! Shared command plumbing: config loading, run directories, goal import.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sculpt_core::field::{read_hfd, read_pgm, HeightField};
use sculpt_core::sim::{ToolMode, ToolSpec};
use sculpt_core::RunConfig;

/// Loads the config file if given, otherwise defaults; always validated.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(sculpt_core::Error::Json)
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

/// Resolves the output directory: an explicit `--out` must not already hold
/// files (runs are never overwritten); otherwise a timestamped directory is
/// created under `./runs`.
pub fn prepare_out_dir(out: Option<&Path>, command: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => {
            if p.exists() && p.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
                bail!(sculpt_core::Error::InvalidConfig(format!(
                    "output directory {} already exists and is not empty",
                    p.display()
                )));
            }
            p.to_path_buf()
        }
        None => {
            let stamp = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .expect("clock after epoch")
                .as_millis();
            PathBuf::from("runs").join(format!("{stamp}_{command}"))
        }
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Writes the resolved config and the verbatim invocation into the run
/// directory, so every run is reproducible from its snapshot.
pub fn snapshot_config(dir: &Path, config: &RunConfig) -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    let snapshot = serde_json::json!({
        "argv": argv,
        "config": config,
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&snapshot)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Imports a goal or start field: HFD natively, PGM through the linear
/// depth mapping with the config's calibration.
pub fn load_field(path: &Path, config: &RunConfig) -> Result<HeightField> {
    let field = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => read_pgm(path, config.field.cell_size_mm, config.field.d_max_mm)?,
        _ => read_hfd(path, true)?,
    };
    Ok(field)
}

/// Tool preset named on the command line; dimensions are fixed per preset,
/// compliance comes from the config.
pub fn tool_by_name(name: &str, compliance: f64, mode: ToolMode) -> Result<ToolSpec> {
    let mut spec = match name {
        "rod" => ToolSpec::rod(8.0, compliance, mode),
        "bar" => ToolSpec {
            shape: sculpt_core::sim::ToolShape::Bar {
                width_mm: 16.0,
                thickness_mm: 6.0,
            },
            compliance,
            mode,
            gripper_span_mm: 50.0,
        },
        "wedge" => ToolSpec {
            shape: sculpt_core::sim::ToolShape::Wedge {
                width_mm: 16.0,
                thickness_mm: 8.0,
            },
            compliance,
            mode,
            gripper_span_mm: 50.0,
        },
        other => bail!(sculpt_core::Error::InvalidConfig(format!(
            "unknown tool preset '{other}' (rod, bar, wedge)"
        ))),
    };
    spec.mode = mode;
    Ok(spec)
}

/// Maps error kinds onto the documented exit codes: 2 config, 3 I/O,
/// 4 numerical, 1 anything else.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<sculpt_core::Error>() {
        Some(e) => match e {
            sculpt_core::Error::InvalidConfig(_)
            | sculpt_core::Error::InvalidAction(_)
            | sculpt_core::Error::InvalidField(_)
            | sculpt_core::Error::ShapeMismatch { .. }
            | sculpt_core::Error::EmptyInput(_) => 2,
            sculpt_core::Error::Io { .. }
            | sculpt_core::Error::Format { .. }
            | sculpt_core::Error::Json(_) => 3,
            sculpt_core::Error::NonFinite(_) => 4,
        },
        None => {
            // io errors wrapped by anyhow contexts
            if err.downcast_ref::<std::io::Error>().is_some() {
                3
            } else {
                1
            }
        }
    }
}

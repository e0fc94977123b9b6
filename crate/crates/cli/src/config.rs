use std::fs;

use realign_core::selftrain::RunConfig;
use serde_json::Value;

use crate::args::RunArgs;
use crate::error::{CliError, CliResult};

/// Builds the run settings for a catalog of `classes` classes.
pub fn resolve(args: &RunArgs, classes: usize) -> CliResult<RunConfig> {
    let mut merged = serde_json::to_value(RunConfig::for_classes(classes)).expect("config serializes");
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(realign_core::Error::from)?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(entries) = file else {
            return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
        };
        let target = merged.as_object_mut().expect("config is an object");
        target.extend(entries);
    }
    let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| CliError::Config(e.to_string()))?;

    macro_rules! apply {
        ($($field:ident),*) => {
            $(if let Some(v) = args.$field {
                cfg.$field = v;
            })*
        };
    }
    apply!(
        lr,
        momentum,
        weight_decay,
        batch_size,
        max_iterations,
        max_epochs,
        alpha,
        k,
        gamma,
        cg_tol,
        cg_max_iter,
        class_limit,
        logit_scale,
        seed,
        train_bias
    );
    if let Some(mode) = args.mode {
        cfg.mode = mode.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn config_file(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_without_overrides() {
        assert_eq!(resolve(&RunArgs::default(), 10).unwrap(), RunConfig::default());
        assert_eq!(resolve(&RunArgs::default(), 300).unwrap().batch_size, 32);
    }

    #[test]
    fn flags_beat_file_beats_defaults() {
        let file = config_file(r#"{"lr": 0.5, "k": 7}"#);
        let args = RunArgs { config: Some(file.path().into()), lr: Some(0.25), ..RunArgs::default() };
        let cfg = resolve(&args, 10).unwrap();
        assert_eq!(cfg.lr, 0.25);
        assert_eq!(cfg.k, 7);
        assert_eq!(cfg.momentum, 0.9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file = config_file(r#"{"learning_rate": 0.5}"#);
        let args = RunArgs { config: Some(file.path().into()), ..RunArgs::default() };
        assert!(matches!(resolve(&args, 10), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_values_are_input_errors() {
        let args = RunArgs { alpha: Some(1.5), ..RunArgs::default() };
        let err = resolve(&args, 10).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}

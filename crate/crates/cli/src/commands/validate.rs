use headsteer_core::trace::{validate_trace, Severity};

use super::load_trace;
use crate::args::ValidateArgs;
use crate::config::{pick, required, switch, FileConfig};
use crate::exit::{fail, Exit, Failure};

pub fn run(args: ValidateArgs, file: &FileConfig) -> Result<(), Failure> {
    let path = required(pick(args.trace, file.validate.trace.clone()), "trace", "validate")?;
    let probe_ready = switch(args.probe_ready, file.validate.probe_ready);
    let trace = load_trace(&path)?;
    let h = &trace.header;
    println!(
        "{}: model {:?}, {} layers x {} heads, d = {}, {} steps from {} prompts",
        path.display(),
        h.model_id,
        h.num_layers,
        h.num_heads,
        h.head_dim,
        h.num_steps,
        h.num_prompts
    );
    let report = validate_trace(&trace.header, &trace.records, probe_ready);
    for v in &report.violations {
        let level = match v.severity {
            Severity::Error => "error",
            Severity::Advisory => "advisory",
        };
        let at = v.record.map(|r| format!(" record {r}")).unwrap_or_default();
        println!("{level}:{at} {}: {}", v.field, v.message);
    }
    let errors = report.errors().count();
    if errors > 0 {
        return fail(Exit::Input, format!("{errors} violation(s) in {}", path.display()));
    }
    println!("ok");
    Ok(())
}

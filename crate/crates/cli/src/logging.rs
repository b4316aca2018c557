use std::io::Write;

use chrono::{SecondsFormat, Utc};
use env_logger::{Builder, Env};

/// Line-delimited `level ts component message` records on stderr.
pub fn init() {
    Builder::from_env(Env::default().default_filter_or("info"))
        .format(|buf, record| {
            let target = record.target();
            let component = target
                .strip_prefix("phenorice_core::")
                .or_else(|| target.strip_prefix("phenorice::"))
                .unwrap_or(target);
            writeln!(
                buf,
                "{} {} {} {}",
                record.level(),
                Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
                component,
                record.args()
            )
        })
        .target(env_logger::Target::Stderr)
        .init();
}

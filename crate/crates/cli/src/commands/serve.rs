use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use headsteer_service::{bind, serve, SteeringService};

use super::load_profile;
use crate::args::ServeArgs;
use crate::config::{pick, required, switch, FileConfig, LISTEN_ENV};
use crate::exit::{Exit, Failure, OrExit};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:7878";

/// Flag, then the environment, then the config file, then the default.
pub fn listen_address(flag: Option<String>, env: Option<String>, file: Option<String>) -> String {
    flag.or(env.filter(|s| !s.is_empty())).or(file).unwrap_or_else(|| DEFAULT_LISTEN.to_string())
}

pub fn run(args: ServeArgs, file: &FileConfig) -> Result<(), Failure> {
    let f = &file.serve;
    let profile_path: PathBuf = required(pick(args.profile, f.profile.clone()), "profile", "serve")?;
    let listen = listen_address(args.listen, std::env::var(LISTEN_ENV).ok(), f.listen.clone());
    let strict = !switch(args.permissive, f.permissive);

    let profile = load_profile(&profile_path, Exit::Input)?;
    let service = SteeringService::new(profile, strict).or_exit(Exit::Input)?;
    let digest = hex::encode(service.digest());
    let heads = service.profile().entries.len();
    let d = service.profile().head_dim;

    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().or_exit(Exit::Network)?;
    runtime.block_on(async move {
        let listener = bind(listen.as_str()).await.or_exit(Exit::Network)?;
        let local = listener.local_addr().or_exit(Exit::Network)?;
        println!("listening on {local}");
        println!("profile {digest}: {heads} heads, d = {d}, {}", if strict { "strict" } else { "permissive" });
        let _ = std::io::stdout().flush();
        serve(listener, Arc::new(service), shutdown_signal()).await.or_exit(Exit::Network)?;
        println!("shut down");
        Ok(())
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

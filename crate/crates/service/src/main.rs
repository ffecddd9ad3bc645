use std::path::PathBuf;

use sketchcage_service::{serve, ServiceConfig};

#[tokio::main]
async fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let path = std::env::args().nth(1).map(PathBuf::from);
    let config = match ServiceConfig::load(path.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error kind=ConfigError message=\"{e}\"");
            std::process::exit(2);
        }
    };
    if let Err(e) = serve(config).await {
        eprintln!("error kind=ServeError message=\"{e}\"");
        std::process::exit(1);
    }
}

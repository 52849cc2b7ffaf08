use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

use super::service::{ServiceContext, SessionService};

/// Accepts connections forever, one thread each.
pub fn serve(listener: TcpListener, ctx: ServiceContext) -> io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let ctx = ctx.clone();
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = handle_connection(stream, ctx) {
                eprintln!("connection {peer:?}: {e}");
            }
        });
    }
    Ok(())
}

/// Runs one connection to completion: line in, zero or more lines out.
pub fn handle_connection(stream: TcpStream, ctx: ServiceContext) -> io::Result<()> {
    let mut writer = io::BufWriter::new(stream.try_clone()?);
    let reader = BufReader::new(stream);
    let mut svc = SessionService::new(ctx);
    let result = pump(reader, &mut writer, &mut svc);
    svc.disconnect();
    result
}

/// The transport-independent loop behind [`handle_connection`].
pub fn pump(
    reader: impl BufRead,
    writer: &mut impl Write,
    svc: &mut SessionService,
) -> io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        for env in svc.handle_line(&line) {
            writer.write_all(env.encode().as_bytes())?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        if svc.is_closed() {
            break;
        }
    }
    Ok(())
}

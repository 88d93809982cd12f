"""Command-line interface: ``trajpsi keygen|encode|query|serve|bench|...``."""
from __future__ import annotations

import csv
import logging
import sys
from pathlib import Path

import click

from . import bench as bench_mod
from . import client, paillier
from .grid import GpsPoint, GridSpec, OutOfBoundsError, TrajectoryBitVector, cell_index
from .paillier import PrivateKey, PublicKey
from .protocol import Mode
from .server import ServerConfig, serve as run_server

EXIT_CLEAR, EXIT_ERROR, EXIT_EXPOSED = 0, 1, 2
DEFAULT_KEY_BITS = 1024

MODE_CHOICE = click.Choice(["full", "card"], case_sensitive=False)


def _mode(text: str) -> Mode:
    return Mode.FULL if text.lower() == "full" else Mode.CARDINALITY


def load_keys(key_dir) -> tuple[PublicKey, PrivateKey]:
    d = Path(key_dir)
    sk = PrivateKey.from_bytes((d / "private.key").read_bytes())
    pk = PublicKey.from_bytes((d / "public.key").read_bytes())
    if pk.key_id != sk.key_id:
        raise click.ClickException(f"{d}: public and private key do not match")
    return pk, sk


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log at INFO level.")
def cli(verbose):
    """Private location intersection for contact tracing."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--bits", type=int, default=DEFAULT_KEY_BITS, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--force", is_flag=True, help="Overwrite existing key files.")
@click.option("--insecure", is_flag=True, hidden=True)
def keygen(bits, out_dir, force, insecure):
    """Generate a Paillier key pair into OUT (public.key, private.key)."""
    out = Path(out_dir)
    targets = [out / "public.key", out / "private.key"]
    if not force and any(p.exists() for p in targets):
        raise click.ClickException(f"key files already exist in {out}; use --force to overwrite")
    try:
        pk, sk = paillier.keygen(bits, insecure=insecure)
    except paillier.PaillierError as exc:
        raise click.ClickException(str(exc))
    out.mkdir(parents=True, exist_ok=True)
    targets[0].write_bytes(pk.to_bytes())
    targets[1].write_bytes(sk.to_bytes())
    targets[1].chmod(0o600)
    click.echo(f"{bits}-bit key {pk.key_id.hex()} written to {out}")


def read_gps_csv(path, spec: GridSpec, skip_oob: bool):
    """Yield (line number, GpsPoint); raises ClickException on parse errors."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return [], []
        missing = {"lat", "lon", "timestamp"} - {f.strip() for f in reader.fieldnames}
        if missing:
            raise click.ClickException(f"{path}: header must contain lat,lon,timestamp (missing {sorted(missing)})")
        points, skipped = [], []
        for row in reader:
            line = reader.line_num
            row = {k.strip(): v for k, v in row.items() if k is not None}
            try:
                p = GpsPoint(float(row["lat"]), float(row["lon"]), float(row["timestamp"]))
            except (TypeError, ValueError):
                raise click.ClickException(f"{path}:{line}: cannot parse lat,lon,timestamp")
            try:
                cell_index(spec, p)
            except OutOfBoundsError as exc:
                if not skip_oob:
                    raise click.ClickException(f"{path}:{line}: {exc}")
                skipped.append(line)
                continue
            points.append(p)
        return points, skipped


@cli.command()
@click.argument("grid_spec", type=click.Path(exists=True, dir_okay=False))
@click.argument("gps_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(dir_okay=False))
@click.option("--skip-oob", is_flag=True, help="Skip out-of-bounds points instead of failing.")
def encode(grid_spec, gps_csv, out, skip_oob):
    """Encode a GPS CSV (lat,lon,timestamp) into a trajectory bit vector file."""
    from .grid import encode_trajectory

    spec = GridSpec.load(grid_spec)
    points, skipped = read_gps_csv(gps_csv, spec, skip_oob)
    v = encode_trajectory(spec, points)
    v.save(out)
    for line in skipped:
        click.echo(f"skipped out-of-bounds point on line {line}", err=True)
    click.echo(f"{len(points)} points, {v.popcount()} cells set of {len(v)}")


def _describe_cell(spec: GridSpec | None, index: int) -> str:
    if spec is None:
        return f"cell {index}"
    b = spec.cell_bounds(index)
    return (f"cell {index}: slot {b['time_slot']} row {b['row']} col {b['col']} "
            f"lat [{b['lat'][0]:.6f}, {b['lat'][1]:.6f}) lon [{b['lon'][0]:.6f}, {b['lon'][1]:.6f}) "
            f"time [{b['time'][0]}, {b['time'][1]})")


@cli.command()
@click.argument("server")
@click.argument("key_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("bitvec", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=MODE_CHOICE, default="full", show_default=True)
@click.option("--grid", "grid_spec", type=click.Path(exists=True, dir_okay=False),
              help="Grid spec used to print matched cell coordinates.")
def query(server, key_dir, bitvec, mode, grid_spec):
    """Query SERVER (host:port) for overlap with the infected vector.

    Exit status: 0 no exposure, 2 exposure found, 1 error.
    """
    pk, sk = load_keys(key_dir)
    v = TrajectoryBitVector.load(bitvec)
    spec = GridSpec.load(grid_spec) if grid_spec else None
    try:
        res = client.query(server, pk, sk, v, _mode(mode))
    except client.ServerError as exc:
        click.echo(f"error: {exc.code}: {exc.message}", err=True)
        sys.exit(EXIT_ERROR)
    except OSError as exc:
        click.echo(f"error: transport: {exc}", err=True)
        sys.exit(EXIT_ERROR)
    if res.mode is Mode.FULL:
        click.echo(f"{res.count} matches")
        for i in res.intersection.set_indices():
            click.echo("  " + _describe_cell(spec, i))
    else:
        click.echo(f"{res.count} matches (count only)")
    sys.exit(EXIT_EXPOSED if res.count else EXIT_CLEAR)


@cli.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
def serve(config):
    """Run a server from a JSON CONFIG file."""
    run_server(ServerConfig.from_file(config))


@cli.command()
@click.argument("server")
@click.argument("token")
@click.argument("bitvec", type=click.Path(exists=True, dir_okay=False))
def ingest(server, token, bitvec):
    """Upload an infected trajectory to SERVER (health-authority path)."""
    try:
        client.ingest(server, token, TrajectoryBitVector.load(bitvec))
    except client.ServerError as exc:
        raise click.ClickException(f"{exc.code}: {exc.message}")
    click.echo("ingested")


@cli.command("publish-key")
@click.argument("server")
@click.argument("key_dir", type=click.Path(exists=True, file_okay=False))
def publish_key(server, key_dir):
    """Register KEY_DIR/public.key with a key-exchange server."""
    raw = (Path(key_dir) / "public.key").read_bytes()
    try:
        kid = client.publish_key(server, raw)
    except client.ServerError as exc:
        raise click.ClickException(f"{exc.code}: {exc.message}")
    click.echo(kid.hex())


@cli.command("fetch-key")
@click.argument("server")
@click.argument("key_id")
@click.argument("out", type=click.Path(dir_okay=False))
def fetch_key(server, key_id, out):
    """Download a public key by hex KEY_ID from a key-exchange server."""
    try:
        raw = client.fetch_key_bytes(server, bytes.fromhex(key_id))
    except client.ServerError as exc:
        raise click.ClickException(f"{exc.code}: {exc.message}")
    Path(out).write_bytes(raw)
    click.echo(f"wrote {out}")


@cli.command("blinded-query")
@click.argument("server")
@click.argument("client_id")
@click.argument("bitvec", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=MODE_CHOICE, default="card", show_default=True)
def blinded_query(server, client_id, bitvec, mode):
    """Compute the intersection on-device against a decryption server."""
    v = TrajectoryBitVector.load(bitvec)
    try:
        result = client.blinded_query(server, client_id, v, _mode(mode))
    except client.ServerError as exc:
        click.echo(f"error: {exc.code}: {exc.message}", err=True)
        sys.exit(EXIT_ERROR)
    count = result if isinstance(result, int) else result.popcount()
    click.echo(f"{count} matches")
    if not isinstance(result, int):
        for i in result.set_indices():
            click.echo(f"  cell {i}")
    sys.exit(EXIT_EXPOSED if count else EXIT_CLEAR)


@cli.command()
@click.option("--sizes", default="10..14", show_default=True,
              help="Vector sizes: '10..14' for 2^10..2^14, or a list like '1024,2^12'.")
@click.option("--bits", "bits_list", default="512,1024", show_default=True)
@click.option("--mode", type=click.Choice(["full", "card", "both"], case_sensitive=False),
              default="both", show_default=True)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False))
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--repeats", type=int, default=1, show_default=True,
              help="Server evaluations per cell; the fastest is kept.")
@click.option("--check-trends", is_flag=True, help="Exit 1 if a scaling ratio falls outside its band.")
def bench(sizes, bits_list, mode, csv_path, workers, repeats, check_trends):
    """Benchmark the protocol across sizes and key widths."""
    results = bench_mod.run_bench(
        bench_mod.parse_sizes(sizes),
        [int(b) for b in bits_list.split(",")],
        bench_mod.parse_modes(mode),
        workers=workers,
        repeats=repeats,
        progress=lambda r: click.echo(
            f"{r.mode} bits={r.key_bits} size={r.set_size} server={r.server_time:.4f}s {'ok' if r.ok else r.error}",
            err=True),
    )
    click.echo(bench_mod.format_table(results))
    if csv_path:
        bench_mod.write_csv(results, csv_path)
    trends = bench_mod.trend_summary(results)
    if trends:
        click.echo("\ntrend (server time ratio):")
        for t in trends:
            click.echo(f"  {t['mode']:<12} {t['kind']:<8} bits={t['key_bits']:<5} size={t['set_size']:<7} {t['ratio']:.2f}")
    failed = [r for r in results if not r.ok]
    bad_trend = False
    for name, ratio, band, ok in bench_mod.trend_checks(results):
        click.echo(f"  check {name}: {ratio:.2f} in [{band[0]}, {band[1]}] -> {'PASS' if ok else 'FAIL'}")
        bad_trend |= not ok
    if failed or (check_trends and bad_trend):
        sys.exit(EXIT_ERROR)


def main(argv=None):
    try:
        rv = cli.main(args=argv, prog_name="trajpsi", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(EXIT_ERROR)
    except click.Abort:
        sys.exit(EXIT_ERROR)
    sys.exit(rv or 0)


if __name__ == "__main__":
    main()

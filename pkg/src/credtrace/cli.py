"""Command-line tool wiring the pipeline steps to subcommands.

Every subcommand reads one INI config file (``--config``, default
``credtrace.ini``; built-in defaults rooted at the working directory when
that file is absent). ``CREDTRACE_<FIELD>`` environment variables override
path fields, ``--set key=value`` flags override anything, in that order.
Success prints a JSON summary on stdout and exits 0; any failure prints a
single JSON object {"error", "message"} on stderr and exits nonzero.

Signing keys are derived from the config's identity seed and a personal
name, so the whole toy chain is reproducible from the config alone. That
is a demo convention, not a custody scheme.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from .apportion import CreditReport, settle_royalties
from .config import (
    Config,
    ConfigError,
    PATH_FIELDS,
    convert_value,
    load_config,
    save_config,
)
from .corpus import read_corpus
from .images import load_image
from .keys import derive_signing_key
from .ledger import Ledger
from .manifest import (
    DirectoryManifestStore,
    ManifestError,
    NoPaymentRoute,
    extract_wallet_route,
    read_sidecar,
    traverse_provenance,
    verify_manifest,
    write_sidecar,
)
from .pipeline import (
    demo_mnist_scale,
    step_attribute,
    step_build_index,
    step_compose_queries,
    step_ingest,
    step_train_encoder,
    step_train_verifier,
)

DEFAULT_CONFIG = "credtrace.ini"
SHARED_NFT_CONTRACT = "cli-assets"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors leave machine-readable JSON, like everything else."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}),
              file=sys.stderr)
        self.exit(2)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _identity(config: Config, name: str):
    return derive_signing_key(config.identity_seed.encode(), name)


def _open_ledger(config: Config) -> Ledger:
    path = Path(config.ledger_log)
    if path.exists():
        return Ledger.replay_log_file(path)
    return Ledger()


def _save_ledger(ledger: Ledger, config: Config) -> None:
    path = Path(config.ledger_log)
    path.parent.mkdir(parents=True, exist_ok=True)
    ledger.save_log(path)


def _shared_nft_contract(ledger: Ledger, config: Config) -> str:
    for address, contract in ledger.contracts.items():
        if contract["kind"] == "nft" and contract.get("name") == SHARED_NFT_CONTRACT:
            return address
    registrar = _identity(config, "registrar")
    return ledger.create_nft_contract(registrar, SHARED_NFT_CONTRACT)


def _rights_contract_for(ledger: Ledger, key, name: str) -> str:
    label = f"rights-{name}"
    for address, contract in ledger.contracts.items():
        if (contract["kind"] == "rights" and contract.get("name") == label
                and contract["creatorWallet"] == key.wallet):
            return address
    return ledger.create_rights_contract(key, label)


def _sidecar_manifest(asset: str):
    path = Path(asset)
    if not path.exists():
        raise FileNotFoundError(f"no asset at {path}")
    return read_sidecar(path)


def _rights_of(ledger: Ledger, manifest) -> tuple[str, str, int]:
    """(rightsContract, nftContract, nftId) behind a manifest's ARA."""
    ara = manifest.asset_reference()
    if ara is None:
        raise NoPaymentRoute(f"manifest {manifest.guid} carries no asset reference")
    nft_contract = f"{ara.contract_address:#042x}"
    rights_contract = ledger.owner_of(nft_contract, ara.nft_id)
    return rights_contract, nft_contract, ara.nft_id


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(config: Config, args) -> int:
    paths = step_ingest(config)
    _emit({"written": len(paths), "corpusDir": config.corpus_dir})
    return 0


def cmd_train_encoder(config: Config, args) -> int:
    images = read_corpus(config.corpus_dir)
    t0 = time.time()
    encoder, report = step_train_encoder(config, images)
    _emit({
        "checkpoint": config.encoder_checkpoint,
        "digest": encoder.parameter_digest(),
        "valMargin": round(report.val_margin, 4),
        "seconds": round(time.time() - t0, 1),
    })
    return 0


def cmd_train_verifier(config: Config, args) -> int:
    images = read_corpus(config.corpus_dir)
    t0 = time.time()
    verifier, report = step_train_verifier(config, images)
    _emit({
        "checkpoint": config.verifier_checkpoint,
        "digest": verifier.parameter_digest(),
        "valAuc": round(report.val_auc, 4),
        "medianPositive": round(report.median_positive, 4),
        "medianNegative": round(report.median_negative, 4),
        "seconds": round(time.time() - t0, 1),
    })
    return 0


def cmd_build_index(config: Config, args) -> int:
    images = read_corpus(config.corpus_dir)
    t0 = time.time()
    index = step_build_index(config, images,
                             embeddings_file=args.embeddings,
                             export_embeddings=args.export_embeddings)
    digest = hashlib.sha256(Path(config.index_file).read_bytes()).hexdigest()
    _emit({
        "indexFile": config.index_file,
        "sha256": digest,
        "vectors": len(index),
        "descriptorCache": config.descriptor_cache,
        "seconds": round(time.time() - t0, 1),
    })
    return 0


def cmd_attribute(config: Config, args) -> int:
    query_path = Path(args.query)
    pixels = load_image(query_path)
    query_id = args.query_id or query_path.stem
    report = step_attribute(config, pixels, query_id)
    out = Path(args.report) if args.report else (
        Path(config.reports_dir) / f"{query_id}.report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    _emit({
        "queryId": query_id,
        "reportFile": str(out),
        "matchedPatches": report.matched_patches,
        "royaltyWeights": report.royalty_weights,
    })
    return 0


def cmd_mint_ora(config: Config, args) -> int:
    asset_path = Path(args.asset)
    if not asset_path.exists():
        raise FileNotFoundError(f"no asset at {asset_path}")
    name = args.creator or asset_path.stem
    key = _identity(config, name)
    ledger = _open_ledger(config)
    store = DirectoryManifestStore(config.store_dir)
    nft_contract = _shared_nft_contract(ledger, config)
    rights_contract = _rights_contract_for(ledger, key, name)
    minted = ledger.mint_ora_asset(asset_path.read_bytes(), key,
                                   rights_contract, nft_contract, store,
                                   creator_name=name)
    sidecar = write_sidecar(minted["manifest"], asset_path)
    _save_ledger(ledger, config)
    _emit({
        "guid": minted["manifest"].guid,
        "araUri": minted["araUri"],
        "nftId": minted["nftId"],
        "rightsContract": minted["rightsContract"],
        "creator": name,
        "creatorWallet": key.wallet,
        "sidecar": str(sidecar),
    })
    return 0


def cmd_issue_right(config: Config, args) -> int:
    manifest = _sidecar_manifest(args.asset)
    ledger = _open_ledger(config)
    rights_contract, nft_contract, nft_id = _rights_of(ledger, manifest)
    creator = _identity(config, manifest.creator_name)
    holder = _identity(config, args.holder)
    right_id = ledger.issue_right(creator, rights_contract, holder.wallet,
                                  args.kind, nft_contract, nft_id,
                                  base_royalty=args.royalty)
    _save_ledger(ledger, config)
    _emit({
        "rightId": right_id,
        "rightKind": args.kind,
        "baseRoyalty": args.royalty,
        "holder": args.holder,
        "holderWallet": holder.wallet,
        "rightsContract": rights_contract,
    })
    return 0


def cmd_deposit(config: Config, args) -> int:
    manifest = _sidecar_manifest(args.asset)
    ledger = _open_ledger(config)
    rights_contract, _, _ = _rights_of(ledger, manifest)
    payer = _identity(config, args.payer)
    fauceted = 0
    shortfall = args.amount - ledger.balance(payer.wallet)
    if shortfall > 0:
        # toy chain: the faucet is the only money source, so a depositor
        # tops up transparently instead of failing
        ledger.faucet(payer.wallet, shortfall)
        fauceted = shortfall
    ledger.deposit_escrow(payer, rights_contract, args.amount)
    _save_ledger(ledger, config)
    _emit({
        "rightsContract": rights_contract,
        "payer": args.payer,
        "payerWallet": payer.wallet,
        "deposited": args.amount,
        "fauceted": fauceted,
        "escrow": ledger.contracts[rights_contract]["escrow"].get(payer.wallet, 0),
    })
    return 0


def cmd_settle(config: Config, args) -> int:
    report = CreditReport.load(args.report)
    ledger = _open_ledger(config)
    manifests = {}
    for image_id in report.royalty_weights:
        candidate = Path(config.corpus_dir) / f"{image_id}.png"
        try:
            manifests[image_id] = read_sidecar(candidate)
        except ManifestError:
            pass  # settled as "failed" with a per-image error
    payer = _identity(config, args.payer)
    payouts = settle_royalties(report, manifests, ledger, payer)
    _save_ledger(ledger, config)
    _emit({
        "queryId": report.query_image_id,
        "paid": sum(p.payout for p in payouts if p.ok),
        "payouts": [{
            "imageId": p.image_id, "weight": p.weight, "status": p.status,
            "wallet": p.wallet, "payout": p.payout, "error": p.error,
        } for p in payouts],
    })
    return 0


def cmd_verify_provenance(config: Config, args) -> int:
    manifest = _sidecar_manifest(args.asset)
    store = DirectoryManifestStore(config.store_dir)
    ledger = _open_ledger(config) if Path(config.ledger_log).exists() else None
    graph = traverse_provenance(manifest, store)

    def wallet_of(m) -> str:
        try:
            return extract_wallet_route(m, ledger)
        except NoPaymentRoute:
            return "(no payment route)"

    def describe(m) -> str:
        result = verify_manifest(m, store)
        state = "ok" if result.valid else ",".join(result.failures)
        return (f"{m.guid[:12]}  {m.creator_name}  "
                f"wallet={wallet_of(m)}  [{state}]")

    if args.json:
        nodes = [{"guid": m.guid, "creator": m.creator_name,
                  "wallet": wallet_of(m),
                  "roles": sorted({r.role for r in m.ingredients}),
                  "valid": verify_manifest(m, store).valid}
                 for m in (store.get(g) for g in graph.guids())]
        _emit({"root": manifest.guid, "manifests": len(nodes), "nodes": nodes})
        return 0

    print(describe(manifest))

    def walk(m, depth: int) -> None:
        for ref in m.ingredients:
            child = store.get(ref.manifest_guid)
            print(f"{'  ' * depth}{ref.role}: {describe(child)}")
            walk(child, depth + 1)

    walk(manifest, 1)
    print(f"{len(graph.guids())} manifests reachable")
    return 0


def cmd_demo(config: Config, args) -> int:
    result = demo_mnist_scale(config, n_queries=args.queries,
                              log=lambda line: print(line, file=sys.stderr))
    out = Path(args.out) if args.out else (
        Path(config.reports_dir) / "demo-mnist-scale.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    summary = result.to_dict()
    summary.pop("queries")
    summary["reportFile"] = str(out)
    _emit(summary)
    if not result.conservation_ok:
        print(json.dumps({"error": "ConservationViolated",
                          "message": "ledger totals changed during the demo"}),
              file=sys.stderr)
        return 1
    return 0


def cmd_compose_queries(config: Config, args) -> int:
    images = read_corpus(config.corpus_dir)
    paths = step_compose_queries(config, images, args.count, args.severity)
    _emit({
        "written": [p.name for p in paths],
        "queriesDir": config.queries_dir,
        "severity": args.severity,
    })
    return 0


def cmd_init_config(config: Config, args) -> int:
    path = Path(args.config)
    if path.exists() and not args.force:
        raise ConfigError(f"{path} already exists (use --force to overwrite)")
    save_config(Config(), path)
    _emit({"configFile": str(path)})
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(
        prog="credtrace",
        description="Provenance, attribution, and royalty settlement "
                    "for a toy image corpus.")
    parser.add_argument("--config", default=DEFAULT_CONFIG,
                        help="INI config file (default: %(default)s; "
                             "built-in defaults if absent)")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config value (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("ingest", help="generate the toy corpus images")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("train-encoder", help="train the patch fingerprint "
                                             "encoder on the corpus")
    p.set_defaults(handler=cmd_train_encoder)

    p = sub.add_parser("train-verifier", help="train the pairwise match "
                                              "verifier on the corpus")
    p.set_defaults(handler=cmd_train_verifier)

    p = sub.add_parser("build-index", help="fingerprint all corpus patches "
                                           "into the vector index")
    p.add_argument("--embeddings", help="build from a precomputed embedding "
                                        "file instead of the encoder")
    p.add_argument("--export-embeddings", metavar="PATH",
                   help="also dump the computed fingerprints to an "
                        "embedding file")
    p.set_defaults(handler=cmd_build_index)

    p = sub.add_parser("attribute", help="attribute a query image to corpus "
                                         "sources")
    p.add_argument("--query", required=True, help="query image file")
    p.add_argument("--report", help="credit report output path")
    p.add_argument("--query-id", help="identifier used inside the report")
    p.set_defaults(handler=cmd_attribute)

    p = sub.add_parser("mint-ora", help="mint an asset into the "
                                        "ownership/rights/attribution binding")
    p.add_argument("--asset", required=True, help="asset file to mint")
    p.add_argument("--creator", help="creator name (default: asset stem)")
    p.set_defaults(handler=cmd_mint_ora)

    p = sub.add_parser("issue-right", help="issue a usage right on a minted "
                                           "asset to a holder")
    p.add_argument("--asset", required=True, help="minted asset file")
    p.add_argument("--holder", required=True, help="holder name")
    p.add_argument("--kind", default="GenerateImage", help="right kind")
    p.add_argument("--royalty", type=int, default=1000,
                   help="base royalty in ledger units")
    p.set_defaults(handler=cmd_issue_right)

    p = sub.add_parser("deposit", help="deposit escrow into an asset's "
                                       "rights contract")
    p.add_argument("--asset", required=True, help="minted asset file")
    p.add_argument("--amount", type=int, required=True)
    p.add_argument("--payer", default="service", help="payer name")
    p.set_defaults(handler=cmd_deposit)

    p = sub.add_parser("settle", help="pay royalties from a credit report")
    p.add_argument("--report", required=True, help="credit report file")
    p.add_argument("--payer", default="service", help="payer name")
    p.set_defaults(handler=cmd_settle)

    p = sub.add_parser("verify-provenance", help="walk and verify an asset's "
                                                 "provenance graph")
    p.add_argument("--asset", required=True, help="asset file with sidecar "
                                                  "manifest")
    p.add_argument("--json", action="store_true", help="machine output")
    p.set_defaults(handler=cmd_verify_provenance)

    p = sub.add_parser("demo-mnist-scale",
                       help="end-to-end toy run: mint, train, attribute, "
                            "settle, conservation check")
    p.add_argument("--queries", type=int, default=10)
    p.add_argument("--out", help="result JSON path")
    p.set_defaults(handler=cmd_demo)

    p = sub.add_parser("compose-queries", help="write composite queries with "
                                               "ground-truth sidecars")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--severity", type=float, default=0.0)
    p.set_defaults(handler=cmd_compose_queries)

    p = sub.add_parser("init-config", help="write a default config file")
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_init_config)

    return parser


def _resolve_config(args) -> Config:
    path = Path(args.config)
    if path.exists():
        config = load_config(path)
    elif args.config != DEFAULT_CONFIG:
        raise ConfigError(f"no config file at {path}")
    else:
        config = Config().resolve(Path.cwd())
    for name in PATH_FIELDS:
        value = os.environ.get(f"CREDTRACE_{name.upper()}")
        if value:
            setattr(config, name, value)
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        if not hasattr(config, key):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(config, key, convert_value(key, raw.strip()))
    return config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.handler is cmd_init_config:
            return cmd_init_config(None, args)
        config = _resolve_config(args)
        return args.handler(config, args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

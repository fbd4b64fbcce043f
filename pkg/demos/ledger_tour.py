"""Tour of the toy chain: mint, rights, escrow, payout, and two attacks.

Act 1 walks the honest lifecycle of one asset. Act 2 shows why the
three-way binding matters: a copy-mint (someone else tokenizes your work
under their key) and a URI substitution (token re-pointed at different
content) both leave fingerprints the triangle check catches. Act 3
replays the transaction log from genesis and compares state digests.
"""

from credtrace.keys import derive_signing_key
from credtrace.ledger import Ledger
from credtrace.manifest import (AraUri, Assertion, GuidFactory, ManifestStore,
                                build_manifest, format_ara_uri, parse_ara_uri)


def banner(text: str) -> None:
    print(f"\n=== {text} ===")


def main() -> None:
    ledger = Ledger()
    store = ManifestStore()
    alice = derive_signing_key(b"ledger-tour", "alice")
    studio = derive_signing_key(b"ledger-tour", "studio")
    mallory = derive_signing_key(b"ledger-tour", "mallory")
    for key in (alice, studio, mallory):
        ledger.faucet(key.wallet, 10_000)

    banner("act 1: honest lifecycle")
    nft_contract = ledger.create_nft_contract(alice, "gallery")
    rights_contract = ledger.create_rights_contract(alice, "alice-rights")
    minted = ledger.mint_ora_asset(b"alice-artwork", alice, rights_contract,
                                   nft_contract, store, creator_name="Alice",
                                   guid_factory=GuidFactory(seed=1))
    print(f"minted {minted['araUri']}")
    verdict = ledger.verify_ora_triangle(minted["manifest"])
    print(f"triangle check: ownership={verdict['ownershipOk']} "
          f"rights={verdict['rightsOk']} attribution={verdict['attributionOk']}")

    right_id = ledger.issue_right(alice, rights_contract, studio.wallet,
                                  "GenerateImage", nft_contract,
                                  minted["nftId"], base_royalty=1000)
    ledger.deposit_escrow(studio, rights_contract, 5000)
    paid = ledger.exercise_right(studio, rights_contract, right_id, weight=0.37)
    print(f"studio exercised right {right_id} at weight 0.37 -> "
          f"paid {paid['payout']} to {paid['paidTo'][:10]}…")
    print(f"alice balance: {ledger.balance(alice.wallet)}")

    banner("act 2a: copy-mint attack")
    attacker_rights = ledger.create_rights_contract(mallory, "mallory-rights")
    base = parse_ara_uri(minted["araUri"])
    stolen_ara = format_ara_uri(AraUri(base.dlt_namespace, base.chain_id,
                                       base.contract_address, 1))
    forged = build_manifest(
        b"alice-artwork", "Alice", mallory,            # Mallory's key signs
        creator_wallet=alice.wallet,                   # but claims Alice's wallet
        assertions=[Assertion("AssetReference", {"uri": stolen_ara}),
                    Assertion("Custom", {"name": "dlt-mint-declaration",
                                         "minterWallet": alice.wallet})],
        store=store, guid_factory=GuidFactory(seed=2))
    from credtrace.canonical import sha256_hex
    ledger.mint_nft(mallory, nft_contract,
                    uri=f"sha256:{sha256_hex(forged.serialize())}")
    ledger.transfer_nft(mallory, nft_contract, 1, attacker_rights)
    ledger.submit(mallory, "bindManifest", {
        "rightsContract": attacker_rights, "nftContract": nft_contract,
        "nftId": 1, "manifestGuid": forged.guid})
    verdict = ledger.verify_ora_triangle(forged)
    print(f"copy-mint detected: {verdict['copyMintDetected']} "
          f"(failures: {', '.join(verdict['failures'])})")
    genuine = ledger.verify_ora_triangle(minted["manifest"])
    print(f"genuine manifest still clean: {not genuine['copyMintDetected']}")

    banner("act 2b: URI substitution")
    ledger.submit(mallory, "setNftUri", {
        "contract": nft_contract, "nftId": minted["nftId"],
        "uri": "sha256:" + "0" * 64})
    verdict = ledger.verify_ora_triangle(minted["manifest"])
    print(f"attribution now fails: {not verdict['attributionOk']} "
          f"(failures: {', '.join(verdict['failures'])})")

    banner("act 3: replay from genesis")
    replayed = Ledger.replay(ledger.log)
    print(f"log entries: {len(ledger.log)}")
    print(f"digests match: {replayed.state_digest() == ledger.state_digest()}")
    print(f"conservation: circulating {ledger.circulating()} == "
          f"issued {ledger.total_issued}: "
          f"{ledger.circulating() == ledger.total_issued}")


if __name__ == "__main__":
    main()

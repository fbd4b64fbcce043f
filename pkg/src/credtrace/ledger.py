"""Deterministic single-node ledger with NFT and rights-contract semantics.

One sequencer applies transactions in order; every applied or rejected tx
is appended to a log, and replaying that log from genesis reproduces the
state digest bit-exactly. Currency is an unsigned integer number of
micro-units. There is no gas and no consensus: the point is contract
semantics, not networking.

Two contract kinds exist. An NFT contract gives standard 721 behavior
(mint, transfer, ownerOf, per-token URI, permanent minter record). A
rights contract anchors the ownership/rights/attribution triangle: it
takes ownership of minted asset tokens, stores each token's manifest GUID,
issues rights tokens against those assets, and holds escrow balances from
which royalty payouts are released to the contract creator's wallet.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .canonical import canonical_json_bytes, sha256_hex
from .keys import SigningKey, verify_signature, wallet_from_public_key, is_wallet_address
from .manifest import (
    AraResolutionFailure,
    AraUri,
    Assertion,
    GuidFactory,
    IngredientRef,
    Manifest,
    ManifestStore,
    build_manifest,
    format_ara_uri,
    verify_manifest,
)

MAX_UNITS = 2**64 - 1
RIGHT_KINDS = ("TrainModel", "GenerateImage", "Resell", "Custom")

# Conventional local-devnet chain identity; baked into every ARA we mint.
DEFAULT_NAMESPACE = "eip155"
DEFAULT_CHAIN_ID = "1337"


class LedgerError(Exception):
    pass


class TxRejected(LedgerError):
    """A convenience wrapper raised by the high-level submit helpers."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class OraMintError(LedgerError):
    pass


@dataclass
class Receipt:
    index: int
    status: str  # "applied" | "rejected"
    error: str | None
    events: list[dict]

    @property
    def ok(self) -> bool:
        return self.status == "applied"

    def event(self, event_type: str) -> dict:
        for ev in self.events:
            if ev["type"] == event_type:
                return ev
        raise KeyError(event_type)


def _require(condition: bool, code: str, detail: str = ""):
    if not condition:
        raise _Reject(code, detail)


class _Reject(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(code)
        self.code = code
        self.detail = detail


def _as_amount(value) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise _Reject("InvalidAmount", "amount must be an integer")
    if value < 0 or value > MAX_UNITS:
        raise _Reject("InvalidAmount", "amount outside unsigned 64-bit range")
    return value


def _token_key(nft_id: int) -> str:
    # JSON object keys must be text; tokens are keyed by decimal id.
    return str(nft_id)


class Ledger:
    """Mutable ledger state plus the transaction sequencer.

    All mutation goes through apply_tx, which validates, applies or
    rejects, and logs. The submit_* helpers build, sign, and apply a tx in
    one call and raise TxRejected if it does not land.
    """

    def __init__(self, namespace: str = DEFAULT_NAMESPACE, chain_id: str = DEFAULT_CHAIN_ID):
        self.namespace = namespace
        self.chain_id = chain_id
        self.balances: dict[str, int] = {}
        self.nonces: dict[str, int] = {}
        self.contracts: dict[str, dict] = {}
        self.total_issued = 0
        self.log: list[dict] = []

    # -- queries ------------------------------------------------------------

    def balance(self, wallet: str) -> int:
        return self.balances.get(wallet, 0)

    def nonce(self, wallet: str) -> int:
        return self.nonces.get(wallet, 0)

    def circulating(self) -> int:
        """Sum of all wallet balances plus all escrowed funds."""
        total = sum(self.balances.values())
        for contract in self.contracts.values():
            if contract["kind"] == "rights":
                total += sum(contract["escrow"].values())
        return total

    def _contract(self, address: str, kind: str) -> dict:
        contract = self.contracts.get(address)
        if contract is None or contract["kind"] != kind:
            raise _Reject("UnknownContract", f"no {kind} contract at {address}")
        return contract

    def owner_of(self, nft_contract: str, nft_id: int) -> str:
        contract = self.contracts.get(nft_contract)
        if contract is None or contract["kind"] != "nft":
            raise LedgerError(f"no nft contract at {nft_contract}")
        token = contract["tokens"].get(_token_key(nft_id))
        if token is None:
            raise LedgerError(f"unknown token {nft_id} in {nft_contract}")
        return token["owner"]

    def minted_by(self, nft_contract: str, nft_id: int) -> str:
        contract = self.contracts.get(nft_contract)
        if contract is None or contract["kind"] != "nft":
            raise LedgerError(f"no nft contract at {nft_contract}")
        minter = contract["mintedBy"].get(_token_key(nft_id))
        if minter is None:
            raise LedgerError(f"unknown token {nft_id} in {nft_contract}")
        return minter

    def token_uri(self, nft_contract: str, nft_id: int) -> str:
        contract = self.contracts.get(nft_contract)
        if contract is None:
            raise LedgerError(f"no contract at {nft_contract}")
        token = contract["tokens"].get(_token_key(nft_id))
        if token is None:
            raise LedgerError(f"unknown token {nft_id} in {nft_contract}")
        return token["uri"]

    # -- state digest / persistence ------------------------------------------

    def state_dict(self) -> dict:
        return {
            "namespace": self.namespace,
            "chainId": self.chain_id,
            "balances": dict(self.balances),
            "nonces": dict(self.nonces),
            "contracts": self.contracts,
            "totalIssued": self.total_issued,
            "height": len(self.log),
        }

    def state_digest(self) -> str:
        return sha256_hex(canonical_json_bytes(self.state_dict()))

    def save_snapshot(self, path: str | Path) -> None:
        Path(path).write_bytes(canonical_json_bytes(self.state_dict()))

    def save_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.log:
                fh.write(canonical_json_bytes(entry).decode("utf-8"))
                fh.write("\n")

    @classmethod
    def replay(cls, entries: Iterable[Mapping], namespace: str = DEFAULT_NAMESPACE,
               chain_id: str = DEFAULT_CHAIN_ID) -> "Ledger":
        """Rebuild a ledger by re-applying a transaction log from genesis.

        Each logged outcome (applied vs rejected, error code) must
        reproduce exactly; a divergence means the log is corrupt or the
        engine is not deterministic, and raises LedgerError.
        """
        ledger = cls(namespace=namespace, chain_id=chain_id)
        for entry in entries:
            receipt = ledger.apply_tx(entry["tx"])
            if receipt.status != entry["status"] or receipt.error != entry.get("error"):
                raise LedgerError(
                    f"replay divergence at index {receipt.index}: "
                    f"{receipt.status}/{receipt.error} vs logged {entry['status']}/{entry.get('error')}"
                )
        return ledger

    @classmethod
    def replay_log_file(cls, path: str | Path, **kwargs) -> "Ledger":
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(json.loads(line))
        return cls.replay(entries, **kwargs)

    # -- transaction engine ---------------------------------------------------

    def apply_tx(self, tx: Mapping) -> Receipt:
        """Validate and apply one transaction.

        Never raises for domain failures: a bad tx yields a rejected
        receipt and leaves state untouched (rejected txs do not consume
        nonces). Both outcomes are appended to the log.
        """
        index = len(self.log)
        events: list[dict] = []
        try:
            self._dispatch(dict(tx), events)
            receipt = Receipt(index=index, status="applied", error=None, events=events)
        except _Reject as reject:
            receipt = Receipt(index=index, status="rejected", error=reject.code, events=[])
        self.log.append({
            "tx": _plain(tx),
            "status": receipt.status,
            "error": receipt.error,
            "events": _plain(receipt.events),
        })
        return receipt

    def _dispatch(self, tx: dict, events: list[dict]) -> None:
        op = tx.get("op")
        params = tx.get("params")
        if not isinstance(op, str) or not isinstance(params, dict):
            raise _Reject("MalformedTx", "missing op or params")

        if op == "faucet":
            # Unsigned issuance op; the only place new currency appears.
            wallet = params.get("wallet")
            _require(is_wallet_address(wallet), "MalformedTx", "bad faucet wallet")
            amount = _as_amount(params.get("amount"))
            _require(self.total_issued + amount <= MAX_UNITS, "InvalidAmount", "supply cap")
            self.balances[wallet] = self.balance(wallet) + amount
            self.total_issued += amount
            events.append({"type": "Issued", "wallet": wallet, "amount": amount})
            return

        sender = self._authenticate(tx)
        handler = {
            "transfer": self._op_transfer,
            "createNftContract": self._op_create_nft_contract,
            "createRightsContract": self._op_create_rights_contract,
            "mintNft": self._op_mint_nft,
            "transferNft": self._op_transfer_nft,
            "setNftUri": self._op_set_nft_uri,
            "bindManifest": self._op_bind_manifest,
            "issueRight": self._op_issue_right,
            "transferRight": self._op_transfer_right,
            "depositEscrow": self._op_deposit_escrow,
            "exerciseRight": self._op_exercise_right,
        }.get(op)
        if handler is None:
            raise _Reject("MalformedTx", f"unknown op {op!r}")
        handler(sender, params, events)
        self.nonces[sender] = self.nonce(sender) + 1

    def _authenticate(self, tx: dict) -> str:
        sender = tx.get("sender")
        public_key = tx.get("publicKey")
        signature = tx.get("signature")
        nonce = tx.get("nonce")
        _require(is_wallet_address(sender), "MalformedTx", "bad sender wallet")
        _require(isinstance(public_key, str) and isinstance(signature, str),
                 "MalformedTx", "missing key or signature")
        _require(wallet_from_public_key(public_key) == sender,
                 "BadSignature", "public key does not derive the sender wallet")
        unsigned = {k: v for k, v in tx.items() if k != "signature"}
        _require(verify_signature(public_key, canonical_json_bytes(unsigned), signature),
                 "BadSignature", "signature check failed")
        _require(nonce == self.nonce(sender), "BadNonce",
                 f"expected {self.nonce(sender)}, got {nonce}")
        return sender

    # -- op handlers ----------------------------------------------------------

    def _op_transfer(self, sender: str, params: dict, events: list[dict]) -> None:
        to = params.get("to")
        _require(is_wallet_address(to), "MalformedTx", "bad destination wallet")
        amount = _as_amount(params.get("amount"))
        _require(self.balance(sender) >= amount, "InsufficientFunds")
        self.balances[sender] -= amount
        self.balances[to] = self.balance(to) + amount
        events.append({"type": "Transferred", "from": sender, "to": to, "amount": amount})

    def _derive_contract_address(self, creator: str, kind: str) -> str:
        import hashlib

        seed = canonical_json_bytes({"creator": creator, "kind": kind, "height": len(self.log)})
        return "0x" + hashlib.sha3_256(seed).digest()[-20:].hex()

    def _op_create_nft_contract(self, sender: str, params: dict, events: list[dict]) -> None:
        address = self._derive_contract_address(sender, "nft")
        _require(address not in self.contracts, "MalformedTx", "address collision")
        self.contracts[address] = {
            "kind": "nft",
            "name": str(params.get("name", "")),
            "creator": sender,
            "nextId": 0,
            "tokens": {},
            "mintedBy": {},
        }
        events.append({"type": "ContractCreated", "contractKind": "nft", "address": address})

    def _op_create_rights_contract(self, sender: str, params: dict, events: list[dict]) -> None:
        address = self._derive_contract_address(sender, "rights")
        _require(address not in self.contracts, "MalformedTx", "address collision")
        self.contracts[address] = {
            "kind": "rights",
            "name": str(params.get("name", "")),
            "creatorWallet": sender,
            "ownedNfts": [],          # [contractAddress, nftId] pairs
            "manifestGuids": {},      # "contractAddress/nftId" -> guid
            "nextRightId": 0,
            "rights": {},
            "escrow": {},
        }
        events.append({"type": "ContractCreated", "contractKind": "rights", "address": address})

    def _op_mint_nft(self, sender: str, params: dict, events: list[dict]) -> None:
        contract = self._contract(params.get("contract"), "nft")
        uri = params.get("uri", "")
        _require(isinstance(uri, str), "MalformedTx", "uri must be text")
        nft_id = contract["nextId"]
        contract["nextId"] = nft_id + 1
        contract["tokens"][_token_key(nft_id)] = {"owner": sender, "uri": uri}
        contract["mintedBy"][_token_key(nft_id)] = sender
        events.append({"type": "NftMinted", "contract": params["contract"],
                       "nftId": nft_id, "minter": sender})

    def _set_rights_ownership(self, nft_contract: str, nft_id: int,
                              old_owner: str, new_owner: str) -> None:
        pair = [nft_contract, nft_id]
        old = self.contracts.get(old_owner)
        if old is not None and old["kind"] == "rights" and pair in old["ownedNfts"]:
            old["ownedNfts"].remove(pair)
        new = self.contracts.get(new_owner)
        if new is not None and new["kind"] == "rights":
            new["ownedNfts"].append(pair)

    def _op_transfer_nft(self, sender: str, params: dict, events: list[dict]) -> None:
        contract = self._contract(params.get("contract"), "nft")
        nft_id = params.get("nftId")
        to = params.get("to")
        _require(isinstance(nft_id, int) and not isinstance(nft_id, bool),
                 "MalformedTx", "nftId must be an integer")
        _require(isinstance(to, str) and to.startswith("0x"), "MalformedTx", "bad destination")
        token = contract["tokens"].get(_token_key(nft_id))
        _require(token is not None, "UnknownToken")
        _require(token["owner"] == sender, "Unauthorized", "only the owner may transfer")
        token["owner"] = to
        self._set_rights_ownership(params["contract"], nft_id, sender, to)
        events.append({"type": "NftTransferred", "contract": params["contract"],
                       "nftId": nft_id, "from": sender, "to": to})

    def _op_set_nft_uri(self, sender: str, params: dict, events: list[dict]) -> None:
        # Deliberately unrestricted: token URIs are mutable metadata on many
        # real deployments, and downstream verification must not trust them.
        contract = self._contract(params.get("contract"), "nft")
        nft_id = params.get("nftId")
        uri = params.get("uri")
        _require(isinstance(nft_id, int) and not isinstance(nft_id, bool),
                 "MalformedTx", "nftId must be an integer")
        _require(isinstance(uri, str), "MalformedTx", "uri must be text")
        token = contract["tokens"].get(_token_key(nft_id))
        _require(token is not None, "UnknownToken")
        token["uri"] = uri
        events.append({"type": "NftUriSet", "contract": params["contract"],
                       "nftId": nft_id, "uri": uri})

    def _op_bind_manifest(self, sender: str, params: dict, events: list[dict]) -> None:
        rights = self._contract(params.get("rightsContract"), "rights")
        nft_contract = params.get("nftContract")
        nft_id = params.get("nftId")
        guid = params.get("manifestGuid")
        _require(rights["creatorWallet"] == sender, "Unauthorized",
                 "only the contract creator may bind manifests")
        _require(isinstance(guid, str) and len(guid) == 32, "MalformedTx", "bad guid")
        _require([nft_contract, nft_id] in rights["ownedNfts"], "Unauthorized",
                 "rights contract does not own this token")
        rights["manifestGuids"][f"{nft_contract}/{nft_id}"] = guid
        events.append({"type": "ManifestBound", "rightsContract": params["rightsContract"],
                       "nftContract": nft_contract, "nftId": nft_id, "manifestGuid": guid})

    def _op_issue_right(self, sender: str, params: dict, events: list[dict]) -> None:
        rights = self._contract(params.get("rightsContract"), "rights")
        _require(rights["creatorWallet"] == sender, "Unauthorized",
                 "only the contract creator may issue rights")
        holder = params.get("holder")
        _require(is_wallet_address(holder), "MalformedTx", "bad holder wallet")
        kind = params.get("rightKind")
        _require(kind in RIGHT_KINDS, "MalformedTx", f"rightKind must be one of {RIGHT_KINDS}")
        detail = params.get("detail", "")
        _require(isinstance(detail, str), "MalformedTx", "detail must be text")
        _require(kind != "Custom" or detail, "MalformedTx", "Custom rights need a detail text")
        nft_contract = params.get("nftContract")
        nft_id = params.get("nftId")
        base_royalty = _as_amount(params.get("baseRoyalty"))
        guid = rights["manifestGuids"].get(f"{nft_contract}/{nft_id}")
        _require(guid is not None, "UnknownToken", "no manifest bound for this token")
        right_id = rights["nextRightId"]
        rights["nextRightId"] = right_id + 1
        rights["rights"][str(right_id)] = {
            "holder": holder,
            "rightKind": kind,
            "detail": detail,
            "baseRoyalty": base_royalty,
            "boundManifestGuid": guid,
            "nftContract": nft_contract,
            "nftId": nft_id,
        }
        events.append({"type": "RightIssued", "rightsContract": params["rightsContract"],
                       "rightId": right_id, "holder": holder, "rightKind": kind,
                       "boundManifestGuid": guid})

    def _op_transfer_right(self, sender: str, params: dict, events: list[dict]) -> None:
        rights = self._contract(params.get("rightsContract"), "rights")
        right = rights["rights"].get(str(params.get("rightId")))
        _require(right is not None, "UnknownToken")
        to = params.get("to")
        _require(is_wallet_address(to), "MalformedTx", "bad destination wallet")
        _require(right["holder"] == sender, "Unauthorized", "only the holder may transfer")
        right["holder"] = to
        events.append({"type": "RightTransferred", "rightsContract": params["rightsContract"],
                       "rightId": params["rightId"], "from": sender, "to": to})

    def _op_deposit_escrow(self, sender: str, params: dict, events: list[dict]) -> None:
        rights = self._contract(params.get("rightsContract"), "rights")
        amount = _as_amount(params.get("amount"))
        _require(self.balance(sender) >= amount, "InsufficientFunds")
        self.balances[sender] -= amount
        rights["escrow"][sender] = rights["escrow"].get(sender, 0) + amount
        events.append({"type": "EscrowDeposited", "rightsContract": params["rightsContract"],
                       "payer": sender, "amount": amount})

    def _op_exercise_right(self, sender: str, params: dict, events: list[dict]) -> None:
        rights = self._contract(params.get("rightsContract"), "rights")
        right = rights["rights"].get(str(params.get("rightId")))
        _require(right is not None, "UnknownToken")
        _require(right["holder"] == sender, "Unauthorized", "only the holder may exercise")
        weight = params.get("weight")
        _require(isinstance(weight, (int, float)) and not isinstance(weight, bool)
                 and 0.0 <= float(weight) <= 1.0,
                 "MalformedTx", "weight must be a fraction in [0, 1]")
        # Half-even rounding keeps repeated settlements unbiased.
        payout = round(right["baseRoyalty"] * float(weight))
        _require(rights["escrow"].get(sender, 0) >= payout, "InsufficientEscrow")
        if payout:
            rights["escrow"][sender] -= payout
            creator = rights["creatorWallet"]
            self.balances[creator] = self.balance(creator) + payout
        events.append({"type": "RightExercised", "rightsContract": params["rightsContract"],
                       "rightId": params["rightId"], "holder": sender,
                       "weight": float(weight), "payout": payout,
                       "boundManifestGuid": right["boundManifestGuid"],
                       "paidTo": rights["creatorWallet"]})

    # -- high-level submission helpers -----------------------------------------

    def faucet(self, wallet: str, amount: int) -> Receipt:
        receipt = self.apply_tx({"op": "faucet", "params": {"wallet": wallet, "amount": amount}})
        if not receipt.ok:
            raise TxRejected(receipt.error or "Rejected")
        return receipt

    def build_tx(self, key: SigningKey, op: str, params: dict) -> dict:
        tx = {
            "op": op,
            "sender": key.wallet,
            "nonce": self.nonce(key.wallet),
            "publicKey": key.public_key_hex,
            "params": params,
        }
        tx["signature"] = key.sign(canonical_json_bytes(tx))
        return tx

    def submit(self, key: SigningKey, op: str, params: dict) -> Receipt:
        receipt = self.apply_tx(self.build_tx(key, op, params))
        if not receipt.ok:
            raise TxRejected(receipt.error or "Rejected", f"op={op}")
        return receipt

    def create_nft_contract(self, key: SigningKey, name: str = "") -> str:
        receipt = self.submit(key, "createNftContract", {"name": name})
        return receipt.event("ContractCreated")["address"]

    def create_rights_contract(self, key: SigningKey, name: str = "") -> str:
        receipt = self.submit(key, "createRightsContract", {"name": name})
        return receipt.event("ContractCreated")["address"]

    def mint_nft(self, key: SigningKey, contract: str, uri: str = "") -> int:
        receipt = self.submit(key, "mintNft", {"contract": contract, "uri": uri})
        return receipt.event("NftMinted")["nftId"]

    def transfer_nft(self, key: SigningKey, contract: str, nft_id: int, to: str) -> Receipt:
        return self.submit(key, "transferNft", {"contract": contract, "nftId": nft_id, "to": to})

    def issue_right(self, key: SigningKey, rights_contract: str, holder: str, right_kind: str,
                    nft_contract: str, nft_id: int, base_royalty: int, detail: str = "") -> int:
        receipt = self.submit(key, "issueRight", {
            "rightsContract": rights_contract, "holder": holder, "rightKind": right_kind,
            "detail": detail, "nftContract": nft_contract, "nftId": nft_id,
            "baseRoyalty": base_royalty,
        })
        return receipt.event("RightIssued")["rightId"]

    def deposit_escrow(self, key: SigningKey, rights_contract: str, amount: int) -> Receipt:
        return self.submit(key, "depositEscrow",
                           {"rightsContract": rights_contract, "amount": amount})

    def exercise_right(self, key: SigningKey, rights_contract: str, right_id: int,
                       weight: float) -> dict:
        receipt = self.submit(key, "exerciseRight", {
            "rightsContract": rights_contract, "rightId": right_id, "weight": weight,
        })
        return receipt.event("RightExercised")

    # -- ARA resolution ---------------------------------------------------------

    def _resolve_ara(self, ara: AraUri) -> tuple[str, dict]:
        if ara.dlt_namespace != self.namespace or ara.chain_id != self.chain_id:
            raise AraResolutionFailure(
                f"URI targets {ara.dlt_namespace}:{ara.chain_id}, "
                f"this ledger is {self.namespace}:{self.chain_id}")
        contract_address = f"{ara.contract_address:#042x}"
        contract = self.contracts.get(contract_address)
        if contract is None or contract["kind"] != "nft":
            raise AraResolutionFailure(f"no nft contract at {contract_address}")
        token = contract["tokens"].get(_token_key(ara.nft_id))
        if token is None:
            raise AraResolutionFailure(f"no token {ara.nft_id} in {contract_address}")
        return contract_address, token

    def resolve_ara_creator_wallet(self, ara: AraUri) -> str:
        """Wallet that payments for the referenced asset should reach.

        If the token is held by a rights contract, that contract's creator
        wallet; otherwise the owning wallet itself.
        """
        _, token = self._resolve_ara(ara)
        owner = token["owner"]
        holding = self.contracts.get(owner)
        if holding is not None and holding["kind"] == "rights":
            return holding["creatorWallet"]
        return owner

    def find_right(self, ara: AraUri, holder: str) -> tuple[str, int] | None:
        """Locate the holder's exercisable right for the referenced asset.

        Returns (rightsContract, rightId), or None when the token is not
        held by a rights contract or no right over its bound manifest was
        issued to this holder. Lowest right id wins if several exist.
        """
        contract_address, token = self._resolve_ara(ara)
        holding = self.contracts.get(token["owner"])
        if holding is None or holding["kind"] != "rights":
            return None
        guid = holding["manifestGuids"].get(f"{contract_address}/{ara.nft_id}")
        if guid is None:
            return None
        for right_id in sorted(holding["rights"], key=int):
            right = holding["rights"][right_id]
            if right["holder"] == holder and right["boundManifestGuid"] == guid:
                return token["owner"], int(right_id)
        return None

    # -- ORA orchestration --------------------------------------------------------

    def mint_ora_asset(
        self,
        asset: bytes,
        creator_key: SigningKey,
        rights_contract: str,
        nft_contract: str,
        store: ManifestStore,
        *,
        creator_name: str,
        assertions: Iterable[Assertion] = (),
        ingredients: Iterable[IngredientRef] = (),
        guid_factory: GuidFactory | None = None,
    ) -> dict:
        """Mint an asset into the full ownership/rights/attribution binding.

        Six steps: build the manifest, declare the minting wallet inside
        it, mint the NFT (URI = manifest digest), hand the token to the
        rights contract, record the manifest GUID there, after which
        rights are issuable. The manifest carries a token URI naming the
        NFT, so the id is reserved before the manifest is signed.

        The flow is atomic: validation happens before the first
        transaction, and a failure mid-flow restores the prior state and
        log, leaving the store untouched.
        """
        creator_wallet = creator_key.wallet
        rights = self.contracts.get(rights_contract)
        if rights is None or rights["kind"] != "rights":
            raise OraMintError(f"no rights contract at {rights_contract}")
        if rights["creatorWallet"] != creator_wallet:
            raise OraMintError("creator does not control the rights contract")
        nft = self.contracts.get(nft_contract)
        if nft is None or nft["kind"] != "nft":
            raise OraMintError(f"no nft contract at {nft_contract}")

        nft_id = nft["nextId"]  # reserved: we are the only writer
        ara = AraUri(self.namespace, self.chain_id, int(nft_contract, 16), nft_id)
        all_assertions = [
            Assertion("CreatorInfo", {"name": creator_name, "wallet": creator_wallet}),
            Assertion("AssetReference", {"uri": format_ara_uri(ara)}),
            Assertion("Custom", {"name": "dlt-mint-declaration", "minterWallet": creator_wallet}),
        ]
        all_assertions.extend(assertions)
        manifest = build_manifest(
            asset, creator_name, creator_key,
            creator_wallet=creator_wallet,
            assertions=all_assertions,
            ingredients=ingredients,
            guid_factory=guid_factory,
        )
        manifest_digest = sha256_hex(manifest.serialize())
        if manifest.guid in store:
            raise OraMintError(f"guid collision: {manifest.guid} already stored")

        checkpoint = json.loads(canonical_json_bytes(self.state_dict()))
        log_mark = len(self.log)
        try:
            minted = self.mint_nft(creator_key, nft_contract, uri=f"sha256:{manifest_digest}")
            if minted != nft_id:
                raise OraMintError("token id moved under the mint")
            self.transfer_nft(creator_key, nft_contract, nft_id, rights_contract)
            self.submit(creator_key, "bindManifest", {
                "rightsContract": rights_contract, "nftContract": nft_contract,
                "nftId": nft_id, "manifestGuid": manifest.guid,
            })
        except (TxRejected, OraMintError) as exc:
            self._restore(checkpoint, log_mark)
            raise OraMintError(f"mint flow failed, rolled back: {exc}") from exc

        store.add(manifest)
        return {
            "manifest": manifest,
            "araUri": format_ara_uri(ara),
            "nftContract": nft_contract,
            "nftId": nft_id,
            "rightsContract": rights_contract,
        }

    def _restore(self, state: dict, log_mark: int) -> None:
        self.balances = dict(state["balances"])
        self.nonces = dict(state["nonces"])
        self.contracts = state["contracts"]
        self.total_issued = state["totalIssued"]
        del self.log[log_mark:]

    def verify_ora_triangle(self, manifest: Manifest) -> dict:
        """Check the three bindings for a manifest-carried token reference.

        ownershipOk: the token exists and is held by a rights contract.
        rightsOk: that contract stores this manifest's GUID for the token.
        attributionOk: the manifest verifies, its creator wallet matches
        its signing key, the declared minting wallet matches the recorded
        minter, and the token URI still names this manifest's bytes.
        copyMintDetected: ownership and rights look fine but attribution
        fails, the signature of a re-mint of someone else's work.
        """
        ara = manifest.asset_reference()
        if ara is None:
            raise AraResolutionFailure("manifest carries no token reference")
        contract_address, token = self._resolve_ara(ara)

        failures: list[str] = []
        owner = token["owner"]
        holding = self.contracts.get(owner)
        ownership_ok = holding is not None and holding["kind"] == "rights"
        if not ownership_ok:
            failures.append("TokenNotHeldByRightsContract")

        rights_ok = False
        if ownership_ok:
            bound = holding["manifestGuids"].get(f"{contract_address}/{ara.nft_id}")
            rights_ok = bound == manifest.guid
            if not rights_ok:
                failures.append("ManifestGuidNotBound")

        attribution_ok = True
        check = verify_manifest(manifest)
        if not check.valid:
            attribution_ok = False
            failures.extend(check.failures)
        signer_wallet = wallet_from_public_key(manifest.signer_public_key)
        if manifest.creator_wallet != signer_wallet:
            attribution_ok = False
            failures.append("CreatorWalletMismatch")
        declared = manifest.declared_minter()
        recorded = self.minted_by(contract_address, ara.nft_id)
        if declared is None or declared != recorded:
            attribution_ok = False
            failures.append("MinterMismatch")
        manifest_digest = sha256_hex(manifest.serialize())
        if token["uri"] != f"sha256:{manifest_digest}":
            attribution_ok = False
            failures.append("UriContentMismatch")

        return {
            "ownershipOk": ownership_ok,
            "rightsOk": rights_ok,
            "attributionOk": attribution_ok,
            "copyMintDetected": ownership_ok and rights_ok and not attribution_ok,
            "failures": failures,
        }


def _plain(value):
    """Deep-copy JSON-compatible structures so the log owns its data."""
    return json.loads(json.dumps(value))

"""Blockchain-backed federated learning for mobile crowdsensing, at desk scale.

Modules: ``ledger`` (chain, blobs, contracts), ``consensus`` (PBFT simulator),
``mechanism`` (data-submission game), ``fedlearn`` (FedAvg), ``settlement``
(ZD repeated game, invoicing, rewards) and ``simcli`` (scenario runner).
"""

__version__ = "0.1.0"

"""Declarative domain knowledge packs."""
from .registry import (GuidanceBundle, GuidanceItem, KnowledgePack, PackError, PackItem,
                       Registry, detect_domains, load_pack, select_guidance, tokens,
                       validate_pack)

__all__ = ["GuidanceBundle", "GuidanceItem", "KnowledgePack", "PackError", "PackItem", "Registry",
           "detect_domains", "load_pack", "select_guidance", "tokens", "validate_pack"]

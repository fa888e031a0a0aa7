"""
Remote planner client
Talks to an OpenAI-compatible chat-completions endpoint and parses its "directive/1" reply
"""
import base64
import io
import json
import logging
import re
from typing import Any, Dict, List, Optional

import httpx
import numpy as np
from PIL import Image, ImageDraw
from pydantic import ValidationError

from app.core.config import Settings, get_settings
from app.core.exceptions import MalformedDirective, MalformedKind, PlannerTimeout, TransportError
from app.models.planning import DIRECTIVE_FORMAT, ActionDirective, AnnotatedObservation, PromptContext, Verb
from app.utils.http_client import get_planner_client

logger = logging.getLogger(__name__)

_FENCE_RE = re.compile(r"```(?:json)?", re.IGNORECASE)
_VERBS = {v.value for v in Verb}
LABEL_COLOR = (255, 255, 255)
LABEL_OUTLINE = (0, 0, 0)


def encode_png(annotated: AnnotatedObservation) -> str:
    """
    Draw identity labels onto the observation and encode it as a PNG data URL

    Args:
        annotated: Rendered image plus (label, (u, v)) pairs

    Returns:
        "data:image/png;base64,..." string
    """
    image = Image.fromarray(np.ascontiguousarray(annotated.rgb, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(image)
    for label, (u, v) in annotated.labels:
        draw.rectangle([u - 1, v - 1, u + 1, v + 1], outline=LABEL_OUTLINE, fill=LABEL_COLOR)
        draw.text((u + 3, v - 5), label, fill=LABEL_COLOR)
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    encoded = base64.b64encode(buffer.getvalue()).decode("utf-8")
    return f"data:image/png;base64,{encoded}"


def build_request(prompt: PromptContext, cfg: Optional[Settings] = None) -> Dict[str, Any]:
    """Chat-completions body: system preamble, then prompt text plus one image attachment"""
    cfg = cfg or get_settings()
    return {
        "model": cfg.PLANNER_MODEL,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": prompt.system_preamble},
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt.render_text()},
                    {"type": "image_url", "image_url": {"url": encode_png(prompt.annotated_observation)}},
                ],
            },
        ],
    }


def _json_objects(text: str) -> List[Any]:
    decoder = json.JSONDecoder()
    found: List[Any] = []
    index = text.find("{")
    while index != -1:
        try:
            value, end = decoder.raw_decode(text, index)
        except json.JSONDecodeError:
            index = text.find("{", index + 1)
            continue
        found.append(value)
        index = text.find("{", end)
    return found


def parse_directive_reply(text: str) -> ActionDirective:
    """
    Extract exactly one directive from a model reply

    Args:
        text: Assistant message content

    Returns:
        ActionDirective

    Raises:
        MalformedDirective: with the malformation class of the reply
    """
    body = _FENCE_RE.sub("", text or "")
    if "{" not in body:
        raise MalformedDirective(MalformedKind.NO_JSON, "reply contains no JSON object")
    objects = _json_objects(body)
    if not objects:
        raise MalformedDirective(MalformedKind.INVALID_JSON, "reply JSON does not decode")
    if len(objects) > 1:
        raise MalformedDirective(MalformedKind.MULTIPLE_OBJECTS, f"reply holds {len(objects)} JSON values")
    data = objects[0]
    if not isinstance(data, dict):
        raise MalformedDirective(MalformedKind.SCHEMA_VIOLATION, "directive must be a JSON object")
    verb = data.get("verb")
    if verb not in _VERBS:
        raise MalformedDirective(MalformedKind.UNKNOWN_VERB, f"unknown verb {verb!r}")
    if data.get("format") != DIRECTIVE_FORMAT:
        raise MalformedDirective(
            MalformedKind.SCHEMA_VIOLATION, f"format must be {DIRECTIVE_FORMAT!r}, got {data.get('format')!r}"
        )
    fields = {k: v for k, v in data.items() if k != "format"}
    target = fields.get("target")
    if isinstance(target, list) and len(target) == 3:
        fields["target"] = {"x": target[0], "y": target[1], "z": target[2]}
    try:
        return ActionDirective.model_validate(fields)
    except ValidationError as e:
        raise MalformedDirective(MalformedKind.SCHEMA_VIOLATION, str(e.errors()[0]["msg"])) from e


async def _post(body: Dict[str, Any], cfg: Settings, client: httpx.AsyncClient) -> str:
    headers = {"Content-Type": "application/json"}
    if cfg.PLANNER_API_KEY:
        headers["Authorization"] = f"Bearer {cfg.PLANNER_API_KEY}"
    url = cfg.PLANNER_ENDPOINT_URL.rstrip("/") + "/chat/completions"
    try:
        response = await client.post(url, json=body, headers=headers, timeout=cfg.PLANNER_TIMEOUT_S)
    except httpx.TimeoutException as e:
        raise PlannerTimeout(f"planner did not answer within {cfg.PLANNER_TIMEOUT_S}s") from e
    except httpx.HTTPError as e:
        raise TransportError(f"planner request failed: {e}") from e
    if response.status_code >= 400:
        raise TransportError(f"planner answered HTTP {response.status_code}")
    try:
        return response.json()["choices"][0]["message"]["content"] or ""
    except (ValueError, KeyError, IndexError, TypeError) as e:
        raise TransportError(f"planner response is not a chat completion: {e}") from e


async def remote_directive(
    prompt: PromptContext,
    cfg: Optional[Settings] = None,
    client: Optional[httpx.AsyncClient] = None,
) -> ActionDirective:
    """
    Ask the remote model for the next directive

    Args:
        prompt: Assembled prompt context
        cfg: Settings override (endpoint, model, retries)
        client: HTTP client; the shared planner client when omitted

    Returns:
        Parsed ActionDirective

    Raises:
        MalformedDirective: every attempt returned a malformed reply
        TransportError: endpoint unreachable or error status
        PlannerTimeout: request timed out
    """
    cfg = cfg or get_settings()
    if client is None:
        client = get_planner_client()
    body = build_request(prompt, cfg)
    attempts = cfg.PLANNER_MAX_RETRIES + 1
    for attempt in range(attempts):
        reply = await _post(body, cfg, client)
        try:
            directive = parse_directive_reply(reply)
            logger.info(f"Remote planner proposed {directive.key()} (attempt {attempt + 1})")
            return directive
        except MalformedDirective as e:
            logger.warning(f"Malformed planner reply (attempt {attempt + 1}/{attempts}): {e}")
            if attempt == attempts - 1:
                raise
    raise MalformedDirective(MalformedKind.NO_JSON, "no attempt was made")

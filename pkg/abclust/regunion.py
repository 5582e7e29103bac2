from abc import ABC, abstractmethod
from typing import Any, Type

from pydantic import BaseModel, GetCoreSchemaHandler, GetJsonSchemaHandler, ValidationError
from pydantic.json_schema import GenerateJsonSchema, JsonSchemaValue
from pydantic_core import InitErrorDetails, core_schema

from abclust.registry import REGISTRIES_CONTEXT_KEY, Registries


def default_registries() -> Registries:
    from abclust.common_registries import root_registry
    return root_registry()


class RegistriesGenerateJsonSchema(GenerateJsonSchema, ABC):
    @abstractmethod
    def get_registries(self) -> Registries:
        ...


def make_registry_schema_generator(registries: Registries) -> type[RegistriesGenerateJsonSchema]:
    class RegistryAwareGenerateJsonSchemaImpl(RegistriesGenerateJsonSchema):
        def get_registries(self) -> Registries:
            return registries
    return RegistryAwareGenerateJsonSchemaImpl


def _registries_for_schema(handler: Any) -> Registries:
    generate = getattr(handler, "generate_json_schema", None)
    if isinstance(generate, RegistriesGenerateJsonSchema):
        return generate.get_registries()
    return default_registries()


class RegistryUnion:
    """Validates a registry-typed model from a dict with a `type` key or from
    the bare key itself. Usage:
    >>> Annotated[CompatSpec, RegistryUnion("compat")]
    """

    def __init__(self, registry_key: str, discriminator: str = "type"):
        self.registry_key = registry_key
        self.discriminator = discriminator

    def __get_pydantic_core_schema__(self, source: Type[Any],
                                     handler: GetCoreSchemaHandler
                                     ) -> core_schema.CoreSchema:
        def union_validator(value, info: core_schema.ValidationInfo):
            if isinstance(value, BaseModel):
                return value
            context = info.context or {}
            registries: Registries = context.get(REGISTRIES_CONTEXT_KEY) or default_registries()
            registry = registries.get_model_registry(self.registry_key)
            if not registry:
                raise ValueError(f"Unknown registry {self.registry_key}")
            if isinstance(value, str):
                value = {self.discriminator: value}
            if not isinstance(value, dict) or self.discriminator not in value:
                raise ValidationError.from_exception_data(
                    "Missing discriminator field", line_errors=[
                        InitErrorDetails(type="missing", loc=(self.discriminator,), input=value)
                    ])
            key = value[self.discriminator]
            model = registry.get(key)
            if model is None:
                raise ValidationError.from_exception_data(
                    f"Unknown registry key for registry '{self.registry_key}'", line_errors=[
                        InitErrorDetails(type="enum", loc=(self.discriminator,), input=key,
                                         ctx={"expected": str(registry.keys())})
                    ])
            return model.model_validate(value, context=info.context)

        return core_schema.with_info_after_validator_function(
            union_validator, core_schema.any_schema())

    def __get_pydantic_json_schema__(self, schema: core_schema.CoreSchema,
                                     handler: GetJsonSchemaHandler
                                     ) -> JsonSchemaValue:
        registries = _registries_for_schema(handler)
        registry = registries.get_model_registry(self.registry_key)
        if not registry:
            return {"type": "object", "title": f"RegistryUnion[{self.registry_key}]"}
        tagged: dict[str, core_schema.CoreSchema] = {}
        for key, model in registry.all().items():
            if not model.__pydantic_complete__:
                model.model_rebuild(force=True)
            tagged[key] = model.__pydantic_core_schema__
        union = core_schema.union_schema([
            core_schema.literal_schema(registry.keys()),
            core_schema.tagged_union_schema(tagged, self.discriminator),
        ])
        return handler(union)
